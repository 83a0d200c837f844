fn main() {
    std::process::exit(crng::cli::run(std::env::args_os()));
}
