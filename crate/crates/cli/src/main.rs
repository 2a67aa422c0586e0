fn main() {
    std::process::exit(tempoinv_cli::run(std::env::args().skip(1)));
}
