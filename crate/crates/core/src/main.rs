fn main() {
    std::process::exit(athresh::cli::run(std::env::args_os()));
}
