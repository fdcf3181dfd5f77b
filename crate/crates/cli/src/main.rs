fn main() {
    std::process::exit(dgff_cli::run(std::env::args_os()));
}
