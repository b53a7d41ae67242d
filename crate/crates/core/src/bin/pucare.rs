fn main() {
    std::process::exit(pucare::cli::dispatch(std::env::args_os()));
}
