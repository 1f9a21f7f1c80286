fn main() {
    std::process::exit(meandev::cli::run());
}
