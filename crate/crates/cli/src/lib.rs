//! Command-line front end for the clue-and-reasoning classification
//! pipeline.
//!
//! Every experiment is one TOML file (see [`config::PipelineConfig`]); flags
//! only override the seed, provider, limits and output paths. Commands live
//! in [`commands`] as plain functions returning outcome structs, so they can
//! be driven in-process as well as from the `clueprompt` binary.

pub mod commands;
pub mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{
    cmd_audit, cmd_augment, cmd_classify, cmd_compact, cmd_eval, cmd_ingest_embeddings, cmd_subsample, AuditArgs,
    AugmentArgs, ClassifyArgs, CompactArgs, EvalArgs, IngestArgs, SubsampleArgs,
};

#[derive(Debug, Parser)]
#[command(
    name = "clueprompt",
    version,
    about = "Clue-and-reasoning prompting for text classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vector index from embedding JSONL.
    IngestEmbeddings(IngestArgs),
    /// Write an n-per-class sample of the training split.
    Subsample(SubsampleArgs),
    /// Generate clues and reasoning for training examples.
    Augment(AugmentArgs),
    /// Classify a split and write prediction records.
    Classify(ClassifyArgs),
    /// Score prediction files (one per trial).
    Eval(EvalArgs),
    /// Reliability, faithfulness and fluency checks on generated reasoning.
    Audit(AuditArgs),
    /// Rewrite a demonstration store with one line per id.
    Compact(CompactArgs),
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("outcome serializes")
}

/// Runs one command, printing its result to standard output.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestEmbeddings(a) => {
            let o = cmd_ingest_embeddings(&a)?;
            println!(
                "indexed {} vectors of dimension {} ({}) into {}",
                o.records,
                o.dimension,
                o.source_tag,
                o.output.display()
            );
        }
        Command::Subsample(a) => {
            let o = cmd_subsample(&a)?;
            println!(
                "wrote {} examples ({} per class, seed {}) to {}",
                o.written,
                o.per_class,
                o.seed,
                o.output.display()
            );
        }
        Command::Augment(a) => {
            let o = cmd_augment(&a)?;
            println!(
                "generated={} skipped={} invalid={} provider_calls={} cache_hits={} store={}",
                o.summary.generated,
                o.summary.skipped,
                o.summary.invalid,
                o.stats.provider_calls,
                o.stats.cache_hits,
                o.store.display()
            );
        }
        Command::Classify(a) => {
            let o = cmd_classify(&a)?;
            for t in &o.trials {
                println!(
                    "trial {}: accuracy={:.4} failed={} truncated={} -> {}",
                    t.trial,
                    t.accuracy,
                    t.failed,
                    t.truncated,
                    t.output.display()
                );
            }
            println!(
                "examples={} provider_calls={} cache_hits={}",
                o.examples, o.stats.provider_calls, o.stats.cache_hits
            );
        }
        Command::Eval(a) => {
            let o = cmd_eval(&a)?;
            if a.json {
                println!("{}", json(&o.report));
            } else {
                print!("{}", o.table());
            }
        }
        Command::Audit(a) => println!("{}", json(&cmd_audit(&a)?)),
        Command::Compact(a) => println!("{} records", cmd_compact(&a)?),
    }
    Ok(())
}
