fn main() {
    std::process::exit(echodepth_cli::run(std::env::args_os()));
}
