fn main() {
    std::process::exit(rlhd_cli::run(std::env::args_os()));
}
