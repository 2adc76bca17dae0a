fn main() {
    std::process::exit(isorg::cli::run(std::env::args_os()));
}
