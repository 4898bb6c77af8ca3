fn main() {
    std::process::exit(geocalc::harness::cli::main(std::env::args_os()));
}
