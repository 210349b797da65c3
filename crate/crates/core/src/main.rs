fn main() {
    std::process::exit(gpvseq_core::cli::run(std::env::args_os()));
}
