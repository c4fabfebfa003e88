use std::process::ExitCode;

fn main() -> ExitCode {
    alibi_surgeon::cli::run(std::env::args_os())
}
