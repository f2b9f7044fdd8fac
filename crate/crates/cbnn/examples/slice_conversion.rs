//! Demonstrates the lossless bit-slice conversion: expands an integer image
//! into per-bit binary channel planes, reconstructs it, and shows what
//! pruning the low-order slices does to pixel values.
//!
//!     cargo run --release --example slice_conversion

use cbnn::bitslice::{b2int, int2b, prune_slices, PixelTensor};

fn main() {
    // a 4x4 single-channel ramp of 8-bit values
    let values: Vec<u32> = (0..16).map(|i| i * 17).collect();
    let img = PixelTensor::new(4, 4, 1, 255, values.clone()).expect("image");

    let sliced = int2b(&img).expect("int2b");
    println!(
        "input 4x4x1 with 8-bit values -> bit-sliced 4x4x{}",
        sliced.channel_count()
    );
    let value = values[5];
    print!("value {value} expands to slices (lsb first):");
    for s in 1..=8 {
        print!(" {}", sliced.bit(1, 1, 0, s));
    }
    println!();

    let back = b2int(&sliced).expect("b2int");
    assert_eq!(back.values, img.values);
    println!("b2int reconstructs the image exactly");

    let pruned = prune_slices(&sliced, &[1, 2, 3, 4]).expect("prune");
    let coarse = b2int(&pruned).expect("b2int");
    println!("\npixel values after pruning slices 1-4 (residual high bits):");
    for (orig, kept) in values.iter().zip(&coarse.values) {
        println!("  {orig:>3} -> {kept:>2}");
    }
}
