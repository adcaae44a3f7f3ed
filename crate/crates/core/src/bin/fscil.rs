fn main() {
    std::process::exit(fscil_core::cli::run(std::env::args_os()));
}
