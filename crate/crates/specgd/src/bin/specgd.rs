fn main() {
    std::process::exit(specgd::cli::run(std::env::args_os()));
}
