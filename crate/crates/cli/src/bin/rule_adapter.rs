//! Line-delimited JSON paraphrase adapter backed by rewrite rules.
//!
//! Reads `{"id", "text", "k"}` requests on stdin and answers each with
//! `{"id", "beams"}` on stdout. Stands in for a translation round trip
//! when no MT system is available.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nluadv_core::corpus::{RuleSet, SyntheticGrammar, Utterance};
use nluadv_core::paraphraser::{rule_paraphrase, AdapterRequest, AdapterResponse};
use nluadv_core::seed;

#[derive(Debug, Parser)]
#[command(name = "nluadv-rule-adapter", version)]
struct Args {
    /// Rule file; the bundled grammar's rules by default.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Pivot language; only varies the sampling stream.
    #[arg(long, default_value = "")]
    lang: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn lang_key(lang: &str) -> u64 {
    lang.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let rules = match &args.rules {
        Some(p) => RuleSet::parse(&std::fs::read_to_string(p)?)?,
        None => SyntheticGrammar::builtin().rules,
    };
    let base = seed::derive(args.seed, &[lang_key(&args.lang)]);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (n, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: AdapterRequest = serde_json::from_str(&line)?;
        let beams = match Utterance::new(req.id.clone(), req.text) {
            Ok(u) => rule_paraphrase(&u, &rules, seed::derive(base, &[n as u64]), req.k).beams.into_iter().map(|b| b.text).collect(),
            Err(_) => Vec::new(),
        };
        serde_json::to_writer(&mut out, &AdapterResponse { id: req.id, beams })?;
        writeln!(out)?;
        out.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
