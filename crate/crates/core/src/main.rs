fn main() {
    std::process::exit(sadv::cli::run(std::env::args_os()));
}
