fn main() {
    std::process::exit(tlg::cli::run());
}
