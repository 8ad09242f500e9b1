fn main() {
    std::process::exit(drpo::cli::dispatch(std::env::args_os()));
}
