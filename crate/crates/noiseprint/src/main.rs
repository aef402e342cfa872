use std::process::ExitCode;

fn main() -> ExitCode {
    noiseprint::cli::main_entry()
}
