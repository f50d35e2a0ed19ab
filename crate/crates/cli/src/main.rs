use std::process::ExitCode;

use clap::Parser;
use linattn_cli::{run, Cli};

#[global_allocator]
static ALLOC: linattn_core::alloc_counter::CountingAllocator =
    linattn_core::alloc_counter::CountingAllocator;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
