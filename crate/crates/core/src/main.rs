fn main() {
    std::process::exit(sinefm::cli::run());
}
