fn main() {
    std::process::exit(nest_core::cli::run(std::env::args_os()));
}
