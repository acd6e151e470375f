fn main() {
    std::process::exit(minsharp_cli::run(std::env::args_os()));
}
