use std::io::Write;
use std::process::ExitCode;

use boneik::cli::{diagnostic, exit_code, run, Cli};
use clap::Parser;

// Per-op tensors are large and short-lived; the system allocator hands them
// back to the kernel on every free, which dominates batched inference.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("{}", diagnostic(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
