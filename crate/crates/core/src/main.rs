fn main() {
    std::process::exit(mtaffect::cli::run(std::env::args_os()));
}
