fn main() {
    std::process::exit(mquant::cli::cli_main(std::env::args_os()));
}
