fn main() {
    std::process::exit(haht::cli::dispatch(std::env::args_os()));
}
