fn main() {
    std::process::exit(reid_core::cli::run(std::env::args_os()));
}
