fn main() {
    std::process::exit(gmfg::cli::run(std::env::args_os()));
}
