fn main() -> std::process::ExitCode {
    rfadet_cli::main_with(std::env::args_os())
}
