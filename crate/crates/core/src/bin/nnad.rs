fn main() {
    std::process::exit(nnad::pipeline::cli::run(std::env::args_os()));
}
