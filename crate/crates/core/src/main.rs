fn main() {
    std::process::exit(lensless::cli::run(std::env::args_os()));
}
