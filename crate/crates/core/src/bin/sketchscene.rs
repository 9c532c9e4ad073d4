fn main() {
    std::process::exit(sketchscene::cli::run(std::env::args_os()));
}
