fn main() {
    std::process::exit(mmerc::cli::run(std::env::args_os()));
}
