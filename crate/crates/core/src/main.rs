fn main() {
    std::process::exit(duet::cli::run(std::env::args_os()));
}
