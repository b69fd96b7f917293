use std::process::ExitCode;

fn main() -> ExitCode {
    chanatt::cli::main_with(std::env::args_os())
}
