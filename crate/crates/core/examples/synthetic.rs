//! Trains every variant on a synthetic corpus and prints test P@20.
//!
//! `cargo run --release -p cotrec --example synthetic -- [d] [epochs] [seed]`

use cotrec::corpus::{prepare, PrepareOptions};
use cotrec::synth::{generate, SynthConfig};
use cotrec::trainer::{evaluate_popularity, train};
use cotrec::{TrainConfig, Variant};

fn main() -> cotrec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).and_then(|a| a.parse().ok()).unwrap_or(default);
    let events = generate(&SynthConfig {
        seed: arg(2, 0),
        ..SynthConfig::default()
    })?;
    let corpus = prepare(&events, &PrepareOptions::default())?;
    println!("{}", corpus.summary());
    let base = TrainConfig {
        d: arg(0, 32) as usize,
        epochs: arg(1, 5) as usize,
        seed: arg(2, 0),
        ..TrainConfig::default()
    };
    let pop = evaluate_popularity(&corpus.train_sessions, corpus.n_items(), &corpus.test_samples, &[20])?;
    println!("popularity\tP@20 {:.4}", pop.p_at[&20]);
    for v in Variant::ALL {
        let start = std::time::Instant::now();
        let outcome = train(&corpus, &v.apply(&base))?;
        let m = outcome.predictor()?.evaluate(&corpus.test_samples, &[20])?;
        println!(
            "{}\tP@20 {:.4}\tMRR@20 {:.4}\t{:.1}s\tbest epoch {:?}",
            v.name(),
            m.p_at[&20],
            m.mrr_at[&20],
            start.elapsed().as_secs_f64(),
            outcome.best_epoch
        );
    }
    Ok(())
}
