fn main() {
    std::process::exit(gram_cli::run(std::env::args_os()));
}
