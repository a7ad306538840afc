fn main() {
    std::process::exit(sharp_cli::run(std::env::args_os()));
}
