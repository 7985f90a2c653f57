fn main() {
    std::process::exit(volcascade::cli::run(std::env::args_os()));
}
