fn main() {
    std::process::exit(reflectsep::cli::run(std::env::args_os()) as i32);
}
