fn main() {
    std::process::exit(selectroscope::cli::run(std::env::args_os()));
}
