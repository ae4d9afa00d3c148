fn main() {
    std::process::exit(sbid::cli::dispatch(std::env::args_os()));
}
