fn main() {
    std::process::exit(flowseq::cli::run_cli(std::env::args_os()));
}
