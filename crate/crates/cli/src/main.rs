fn main() {
    std::process::exit(mood_cli::run(std::env::args_os()));
}
