//! Rebuilds the fixture archives and records the replay files by running
//! the pipeline against a scripted stand-in for the analyst model.
//!
//! cargo run -p rulesmith --example make_fixtures

#[path = "../tests/common/mod.rs"]
mod common;

use common::*;

fn main() {
    let fx = fixtures_dir();
    let src = fx.join("corpus_src");
    let _ = std::fs::remove_dir_all(fx.join("corpus"));
    let _ = std::fs::remove_dir_all(fx.join("dedup"));
    println!(
        "packed {} corpus archives",
        pack_corpus(&src, &fx.join("corpus")).len()
    );
    println!(
        "packed {} dedup archives",
        pack_dedup_set(&src, &fx.join("dedup")).len()
    );

    let replay = fx.join("replay");
    std::fs::create_dir_all(&replay).unwrap();

    let report = record_pipeline(&replay.join("pipeline.jsonl"));
    println!(
        "pipeline: {} jobs, {} rules, {} failures",
        report.jobs,
        report.rules,
        report.failures.len()
    );
    for f in &report.failures {
        println!(
            "  failure {:?} {:?} {}: {}",
            f.provenance, f.format, f.stage, f.error
        );
    }

    let rule = record_variants(&replay.join("variants.jsonl"));
    println!("variant rule:\n{}", rule.text);

    let failure = record_stubborn(&replay.join("stubborn.jsonl"));
    println!("stubborn: gave up after {} attempts", failure.attempts);
}
