use std::process::ExitCode;

fn main() -> ExitCode {
    match oxidet::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
