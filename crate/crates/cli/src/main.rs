fn main() {
    std::process::exit(relate3d_cli::run(std::env::args_os()));
}
