use std::process::ExitCode;

fn main() -> ExitCode {
    let env: Vec<(String, String)> = std::env::vars().collect();
    match segrl_cli::run(std::env::args_os(), &env) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("segrl: {f}");
            ExitCode::from(f.code.clamp(1, 255) as u8)
        }
    }
}
