fn main() {
    std::process::exit(dapnet::cli::run(std::env::args_os()));
}
