fn main() {
    std::process::exit(active_probe::cli::run(std::env::args_os()));
}
