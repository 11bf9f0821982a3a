//! Temporary hyperparameter probe (deleted before release).

use std::time::Instant;

use hipool::chunker::Vocabulary;
use hipool::data::{split, synth_longrange};
use hipool::encoder::{Aggregator, EncoderConfig};
use hipool::model::{prepare_docs, ModelParams, PrepOptions};
use hipool::trainer::{evaluate, train, TrainOptions};

fn run_once(
    n_docs: usize,
    cpd: usize,
    chunk_len: usize,
    d: usize,
    lr: f64,
    epochs: usize,
    batch: usize,
    agg: Aggregator,
    seed: u64,
    split_ratios: [f64; 3],
    max_tokens: Option<usize>,
) -> (f64, f64, usize) {
    let corpus = synth_longrange(n_docs, 2, cpd, chunk_len, 1234).unwrap();
    let s = split(&corpus, split_ratios, seed).unwrap();
    let vocab = Vocabulary::build(s.train.documents.iter().map(|d| d.text.as_str()));
    let opts = PrepOptions {
        chunk_len,
        overlap: chunk_len / 2,
        max_node: 8,
        max_tokens,
    };
    let train_docs = prepare_docs(&s.train, &vocab, &opts).unwrap();
    let test_docs = if s.test.is_empty() {
        vec![]
    } else {
        prepare_docs(&s.test, &vocab, &opts).unwrap()
    };
    let cfg = EncoderConfig {
        d,
        aggregator: agg,
        ..Default::default()
    };
    let mut params = ModelParams::init(&cfg, Some(vocab.size()), 2, false, seed).unwrap();
    let topts = TrainOptions {
        lr,
        epochs,
        batch_size: batch,
        seed,
        patience: None,
    };
    let logs = train(&mut params, &cfg, &train_docs, None, &topts).unwrap();
    let first_perfect = logs
        .iter()
        .find(|l| l.train_f1 >= 1.0)
        .map(|l| l.epoch)
        .unwrap_or(0);
    let train_f1 = logs.last().unwrap().train_f1;
    let test_f1 = if test_docs.is_empty() {
        f64::NAN
    } else {
        evaluate(&params, &cfg, &test_docs).unwrap().micro_f1
    };
    (train_f1, test_f1, first_perfect)
}

#[test]
#[ignore]
fn probe_overfit() {
    for d in [16] {
        for lr in [0.01, 0.02, 0.05] {
            let t0 = Instant::now();
            for seed in 0..5 {
                let (tr, _, at) = run_once(
                    64, 4, 12, d, lr, 200, 8, Aggregator::Sum, seed, [1.0, 0.0, 0.0], None,
                );
                println!(
                    "overfit d={d} lr={lr} seed={seed}: train_f1={tr:.3} perfect_at={at}"
                );
            }
            println!("  elapsed {:?}", t0.elapsed());
        }
    }
}

#[test]
#[ignore]
fn probe_hierarchy() {
    for lr in [0.01] {
        for epochs in [35] {
            let t0 = Instant::now();
            for seed in 0..8 {
                let (htr, hte, _) = run_once(
                    1000, 4, 12, 16, lr, epochs, 16, Aggregator::Sum, seed,
                    [0.8, 0.1, 0.1], None,
                );
                let (str_, ste, _) = run_once(
                    1000, 4, 12, 16, lr, epochs, 16, Aggregator::Simple, seed,
                    [0.8, 0.1, 0.1], None,
                );
                println!(
                    "hier lr={lr} ep={epochs} seed={seed}: hipool tr/te {htr:.3}/{hte:.3}  simple tr/te {str_:.3}/{ste:.3}  margin {:.3}",
                    hte - ste
                );
            }
            println!("  elapsed {:?}", t0.elapsed());
        }
    }
}

#[test]
#[ignore]
fn probe_length_ablation() {
    let t0 = Instant::now();
    for seed in 0..5 {
        let (_, half, _) = run_once(
            1000, 4, 12, 16, 0.01, 35, 16, Aggregator::Sum, seed, [0.8, 0.1, 0.1],
            Some(24),
        );
        let (_, full, _) = run_once(
            1000, 4, 12, 16, 0.01, 35, 16, Aggregator::Sum, seed, [0.8, 0.1, 0.1],
            Some(48),
        );
        println!("ablate seed={seed}: half={half:.3} full={full:.3} margin={:.3}", full - half);
    }
    println!("  elapsed {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn probe_aggregators() {
    for agg in [Aggregator::Sum, Aggregator::Mean, Aggregator::Std] {
        for seed in 0..5 {
            let (tr, _, at) = run_once(
                64, 4, 12, 16, 0.01, 200, 8, agg, seed, [1.0, 0.0, 0.0], None,
            );
            println!("agg {agg:?} seed={seed}: train_f1={tr:.3} perfect_at={at}");
        }
    }
}
