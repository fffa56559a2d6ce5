fn main() {
    std::process::exit(plft::cli::run(std::env::args_os()));
}
