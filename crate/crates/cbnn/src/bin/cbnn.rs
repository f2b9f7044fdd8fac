fn main() {
    std::process::exit(cbnn::cli::run());
}
