fn main() {
    std::process::exit(softmoe::cli::run(std::env::args_os()));
}
