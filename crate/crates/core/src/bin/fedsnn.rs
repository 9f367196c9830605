fn main() {
    std::process::exit(fedsnn::cli::run(std::env::args_os()));
}
