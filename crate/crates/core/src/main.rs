fn main() {
    std::process::exit(synstream::cli::run(std::env::args_os()));
}
