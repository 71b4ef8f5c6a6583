fn main() {
    std::process::exit(dfsp_cli::run(std::env::args_os()));
}
