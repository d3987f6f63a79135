fn main() {
    std::process::exit(spectralx::cli::main_with(std::env::args_os()));
}
