use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use limsup_lab::cli::{run, ExperimentConfig};
use limsup_lab::LabError;

/// Reproducible experiment runner for limsup-set dimension machinery.
#[derive(Parser)]
#[command(name = "limsup-lab", version)]
struct Args {
    /// path to a flat key=value experiment config
    #[arg(long)]
    config: PathBuf,
    /// override the out.dir key of the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// parse and echo the canonical config without running
    #[arg(long)]
    check: bool,
}

fn real_main(args: &Args) -> Result<(), LabError> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out
            .to_str()
            .ok_or_else(|| LabError::Config("non-utf8 output path".into()))?
            .to_string();
    }
    if args.check {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let outcome = run(&cfg)?;
    for f in &outcome.outputs {
        println!("wrote {}/{f}", cfg.out_dir);
    }
    println!("{}", serde_json::to_string(&outcome.summary).expect("summary"));
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match real_main(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
