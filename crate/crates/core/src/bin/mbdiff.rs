fn main() {
    std::process::exit(mbdiff::cli::run(std::env::args_os()));
}
