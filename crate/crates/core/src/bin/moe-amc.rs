fn main() {
    std::process::exit(moe_amc::cli::run_cli(std::env::args_os()));
}
