fn main() {
    std::process::exit(cvq_core::cli::dispatch(std::env::args_os()));
}
