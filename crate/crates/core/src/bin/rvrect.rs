fn main() {
    std::process::exit(rvrect::cli::run(std::env::args_os()));
}
