fn main() {
    std::process::exit(aqualoc::harness::cli::run(std::env::args_os()));
}
