fn main() {
    std::process::exit(semst::cli::run(std::env::args_os()));
}
