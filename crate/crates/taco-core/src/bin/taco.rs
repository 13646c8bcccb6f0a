fn main() {
    env_logger::init();
    std::process::exit(taco_core::cli::run(std::env::args_os()));
}
