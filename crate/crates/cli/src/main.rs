use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = goalpipe_cli::run(std::env::args_os());
    if outcome.status == 0 || outcome.output.starts_with('{') {
        println!("{}", outcome.output);
    } else {
        eprintln!("{}", outcome.output);
    }
    ExitCode::from(outcome.status as u8)
}
