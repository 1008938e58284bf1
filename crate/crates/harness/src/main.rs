fn main() {
    std::process::exit(sparq_harness::cli::run(std::env::args_os()));
}
