fn main() {
    let code = sapflux_cli::run(std::env::args_os());
    std::process::exit(code);
}
