fn main() {
    std::process::exit(rectflow::cli::run(std::env::args_os()));
}
