fn main() {
    std::process::exit(mtseq::cli::main_with_args(std::env::args_os()));
}
