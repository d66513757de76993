fn main() {
    std::process::exit(morphwalk_cli::run(std::env::args_os()));
}
