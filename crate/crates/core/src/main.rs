fn main() {
    std::process::exit(noisemix::cli::main_with_args(std::env::args_os()));
}
