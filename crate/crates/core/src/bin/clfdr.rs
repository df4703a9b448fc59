fn main() {
    std::process::exit(clfdr_core::cli::run(std::env::args_os()));
}
