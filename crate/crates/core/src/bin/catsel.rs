use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(catsel::cli::main_entry() as u8)
}
