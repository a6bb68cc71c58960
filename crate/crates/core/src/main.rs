fn main() {
    std::process::exit(stratlab::cli::dispatch(std::env::args_os()));
}
