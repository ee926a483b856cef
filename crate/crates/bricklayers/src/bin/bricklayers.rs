fn main() { std::process::exit(bricklayers::cli::run(std::env::args())) }
