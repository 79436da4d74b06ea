fn main() {
    std::process::exit(roadsurf_cli::main_with_args(std::env::args_os()));
}
