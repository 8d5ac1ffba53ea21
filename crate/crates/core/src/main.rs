fn main() {
    std::process::exit(lookahead::cli::run(std::env::args_os()));
}
