fn main() {
    std::process::exit(ncgm::cli::run_from(std::env::args_os()));
}
