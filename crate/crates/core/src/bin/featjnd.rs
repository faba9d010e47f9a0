fn main() {
    std::process::exit(featjnd::cli::run(std::env::args_os()));
}
