use std::process::ExitCode;

fn main() -> ExitCode {
    match kvqa_core::cli::run(std::env::args_os()) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json_line());
            ExitCode::from(1)
        }
    }
}
