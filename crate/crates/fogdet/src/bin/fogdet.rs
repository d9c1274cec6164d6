fn main() {
    std::process::exit(fogdet::pipeline::cli::run_from_args());
}
