fn main() {
    std::process::exit(flowprompt::harness::cli::main_with_args(std::env::args_os()));
}
