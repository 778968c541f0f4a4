fn main() {
    std::process::exit(dps_refine::cli::run(std::env::args_os()));
}
