fn main() {
    std::process::exit(vsum_cli::run(std::env::args_os()));
}
