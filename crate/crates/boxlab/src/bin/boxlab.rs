fn main() {
    std::process::exit(boxlab::cli::run());
}
