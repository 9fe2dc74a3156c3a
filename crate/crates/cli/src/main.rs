fn main() {
    std::process::exit(udmamba_cli::run(std::env::args_os()));
}
