use std::process::ExitCode;

use a1lite_cli::app::{run, Cli};
use a1lite_cli::output::render;
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            print!("{}", render(&o.report, cli.out));
            if cli.out == a1lite_cli::output::OutFormat::Json {
                println!();
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            match e.downcast_ref::<a1lite::Error>() {
                Some(de) => eprintln!("error: {} {de}", de.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
