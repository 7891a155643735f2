fn main() {
    std::process::exit(road::cli::run(std::env::args_os()));
}
