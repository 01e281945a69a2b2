fn main() {
    std::process::exit(tempo_meta::cli::run(std::env::args_os()));
}
