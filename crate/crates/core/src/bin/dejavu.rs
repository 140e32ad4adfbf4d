fn main() {
    std::process::exit(dejavu::cli::run(std::env::args_os()));
}
