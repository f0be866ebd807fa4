fn main() {
    std::process::exit(cdnn::cli::run(std::env::args_os()));
}
