fn main() {
    let code = tinyzamba_cli::run(std::env::args().collect());
    std::process::exit(code);
}
