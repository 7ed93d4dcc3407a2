fn main() {
    std::process::exit(retarget::cli::run_cli(std::env::args_os()));
}
