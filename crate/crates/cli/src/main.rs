fn main() {
    std::process::exit(molrmog_cli::run(std::env::args_os()));
}
