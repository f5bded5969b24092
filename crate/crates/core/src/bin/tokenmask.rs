fn main() {
    std::process::exit(tokenmask::cli::run(std::env::args_os()));
}
