//! Compact end-to-end run: synthesize a gallery, train the global
//! classifier, train the local embedding on attended patches with the
//! triplet loss, and evaluate fused-descriptor retrieval.
//!
//! Scaled down (12 identities) so it finishes in about a minute; pass a
//! different seed as the first argument.

use gatn::data::split;
use gatn::data::synth::{synth_generate, SynthConfig};
use gatn::eval::{evaluate, EvalConfig};
use gatn::global::{train_global, GlobalTrainConfig};
use gatn::triplet::{train_triplet, MiningConfig, MiningMode, TripletTrainConfig};
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let start = Instant::now();
    let dir = std::path::PathBuf::from("pipeline-demo");
    let (dataset, _) = synth_generate::<f32>(&SynthConfig {
        ids: 12,
        images_per_id: 4,
        cameras: 2,
        seed,
        out_dir: dir,
    })
    .unwrap();
    let (train, test) = split(&dataset, 4, seed).unwrap();
    println!(
        "dataset: {} train identities, {} queries, {} gallery",
        train.num_identities(),
        test.queries.len(),
        test.gallery.len()
    );

    let (mut gparams, greport) = train_global(
        &train,
        &GlobalTrainConfig {
            epochs: 150,
            target_accuracy: 0.96,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "global classifier: {:.1}% train accuracy after {} epochs",
        100.0 * greport.final_accuracy,
        greport.epoch_losses.len()
    );

    let (mut lparams, treport) = train_triplet(
        &train,
        &gparams,
        &TripletTrainConfig {
            epochs: 40,
            seed,
            mining: MiningConfig {
                mode: MiningMode::SemiHard,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "local embedding: {} triplet epochs (converged early: {})",
        treport.epochs.len(),
        treport.converged_early
    );

    let fused = evaluate(&test, &mut gparams, Some(&mut lparams), &EvalConfig::default()).unwrap();
    println!("fused retrieval:\n{fused}");
    let global_only = evaluate(
        &test,
        &mut gparams,
        None,
        &EvalConfig { k_patches: 0, ..Default::default() },
    )
    .unwrap();
    println!("global-only retrieval:\n{global_only}");
    println!("total {:.1?}", start.elapsed());
}
