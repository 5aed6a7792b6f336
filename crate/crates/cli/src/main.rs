//! `mmdit`: generation, editing, inversion, attention analysis, block
//! selection and the attention benchmark from the command line.
//!
//! Every command reads a JSON run config (`--config`), applies flag
//! overrides, writes its artifacts under `--out` together with
//! `config.resolved.json` and `report.json`, and exits with 0 on success,
//! 1 on a runtime failure and 2 on a usage error. Failures are reported
//! as JSON on stderr.

mod commands;
mod config;
mod fail;
mod out;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{resolve, Overrides};
use fail::CliError;
use out::OutDir;

#[derive(Parser)]
#[command(name = "mmdit", version, about = "Attention analysis and prompt-based editing on a toy joint-attention transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a latent from `prompt`.
    Generate(Overrides),
    /// Edit a generated image from `source_prompt` to `target_prompt`.
    Edit(Overrides),
    /// Edit a real latent, inverting it first unless `inverted` is given.
    EditReal(Overrides),
    /// Invert a real latent toward seeded noise.
    Invert(Overrides),
    /// Dump token maps, quadrants, T2T diagonality and I2I PCA.
    AnalyzeAttn(Overrides),
    /// Score blocks on a synthetic segmentation corpus and pick the top k.
    SelectBlocks(Overrides),
    /// Time streaming against materialized joint attention.
    BenchAttention(Overrides),
}

fn run(command: Command) -> Result<String, CliError> {
    let (name, flags) = match &command {
        Command::Generate(f) => ("generate", f),
        Command::Edit(f) => ("edit", f),
        Command::EditReal(f) => ("edit-real", f),
        Command::Invert(f) => ("invert", f),
        Command::AnalyzeAttn(f) => ("analyze-attn", f),
        Command::SelectBlocks(f) => ("select-blocks", f),
        Command::BenchAttention(f) => ("bench-attention", f),
    };
    let r = resolve(flags)?;
    let report = match command {
        Command::Generate(_) => commands::generate(&r),
        Command::Edit(_) => commands::edit(&r),
        Command::EditReal(_) => commands::edit_real(&r),
        Command::Invert(_) => commands::invert_cmd(&r),
        Command::AnalyzeAttn(_) => commands::analyze_attn(&r),
        Command::SelectBlocks(_) => commands::select_blocks(&r),
        Command::BenchAttention(_) => commands::bench_attention(&r),
    }?;
    let out = OutDir::create(&r.out)?;
    out.json("config.resolved.json", &r.snapshot())?;
    out.json("report.json", &report)?;
    Ok(format!("{name}: wrote {}", r.out.join("report.json").display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.exit_code() == 0 => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({
                "error": { "kind": "usage", "exit_code": 2, "message": e.to_string().trim_end() }
            });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
