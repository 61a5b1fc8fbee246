fn main() -> std::process::ExitCode {
    temporal_adapters::cli::main_with_args(std::env::args_os())
}
