fn main() {
    std::process::exit(cfdcam::cli::run(std::env::args_os()));
}
