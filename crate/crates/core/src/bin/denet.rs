fn main() {
    std::process::exit(denet::cli::run(std::env::args_os()));
}
