fn main() {
    std::process::exit(splitquant::cli::run(std::env::args_os()));
}
