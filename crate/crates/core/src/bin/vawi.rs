fn main() {
    std::process::exit(vawi::cli::run(std::env::args_os()));
}
