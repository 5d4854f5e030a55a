fn main() {
    std::process::exit(pct_cli::dispatch(std::env::args_os()));
}
