fn main() {
    std::process::exit(pacset::cli::run(std::env::args_os()));
}
