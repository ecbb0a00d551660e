fn main() -> std::process::ExitCode {
    tvlt::cli::main_with_args(std::env::args_os())
}
