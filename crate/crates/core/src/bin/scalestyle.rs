use std::io;
use std::process::ExitCode;

use scalestyle::cli::{run, Env};

fn main() -> ExitCode {
    let code = run(
        std::env::args_os(),
        &Env::from_process(),
        &mut io::stdout(),
        &mut io::stderr(),
    );
    ExitCode::from(code as u8)
}
