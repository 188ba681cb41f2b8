fn main() {
    std::process::exit(discourse_rater::cli::cli_run(std::env::args_os()));
}
