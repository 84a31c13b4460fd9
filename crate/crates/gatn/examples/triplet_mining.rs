//! Online triplet mining: build a P×K batch of noisy identity clusters and
//! compare what the hard, semi-hard and unrestricted miners select.

use gatn::tensor::Tensor;
use gatn::triplet::{mine_triplets, MiningConfig, MiningMode};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (p, k, d) = (4usize, 3usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // identity clusters: one center per identity plus per-image noise
    let mut data = Vec::with_capacity(p * k * d);
    let mut labels = Vec::with_capacity(p * k);
    for id in 0..p {
        let center: Vec<f64> = (0..d).map(|_| rng.random_range(-0.6..0.6)).collect();
        for _ in 0..k {
            data.extend(center.iter().map(|c| c + rng.random_range(-0.5..0.5)));
            labels.push(id as u32);
        }
    }
    let embeddings = Tensor::from_vec(&[p * k, d], data).unwrap();

    for mode in [MiningMode::Hard, MiningMode::SemiHard, MiningMode::All] {
        let outcome = mine_triplets(
            &embeddings,
            &labels,
            &MiningConfig {
                margin: 0.8,
                mode,
                p,
                k,
            },
        )
        .unwrap();
        println!(
            "{mode:?}: {} triplets out of {} anchor-positive pairs",
            outcome.triplets.len(),
            p * k * (k - 1)
        );
        for t in outcome.triplets.iter().take(4) {
            println!(
                "  anchor {} (id {}) positive {} negative {} (id {})",
                t.anchor, labels[t.anchor], t.positive, t.negative, labels[t.negative]
            );
        }
    }
}
