fn main() {
    std::process::exit(compogan::cli::run(std::env::args_os()));
}
