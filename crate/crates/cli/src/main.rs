use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use dgm_cli::error::{EXIT_OK, EXIT_USAGE};
use dgm_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    let result = init_threads().and_then(|()| {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        let mut err = io::stderr();
        let r = run(&cli, &mut out, &mut err);
        let _ = out.flush();
        r
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dgm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
