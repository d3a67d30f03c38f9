fn main() {
    std::process::exit(hlm_cli::run(std::env::args_os().skip(1)));
}
