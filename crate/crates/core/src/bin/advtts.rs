fn main() {
    std::process::exit(advtts::cli::run(std::env::args_os()));
}
