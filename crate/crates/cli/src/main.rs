fn main() {
    std::process::exit(layerforge_cli::run(std::env::args_os()));
}
