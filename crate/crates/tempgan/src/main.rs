fn main() {
    env_logger::init();
    std::process::exit(tempgan::cli::run(std::env::args()));
}
