//! Triplet cost, hard/semi-hard mining, P x K batch construction, and the
//! second-stage training loop for the local network.
//!
//! Mining follows the per-pair rule: for every ordered (anchor, positive)
//! pair the single qualifying negative with minimal distance is emitted;
//! pairs with no qualifying negative are skipped. Hard triplets satisfy
//! `d_an^2 < d_ap^2`; semi-hard triplets satisfy
//! `d_ap^2 < d_an^2 < d_ap^2 + margin` with strict inequalities.

use crate::data::{stack_images, Dataset};
use crate::error::{Error, Result};
use crate::global::{analyze, GlobalParams};
use crate::local::LocalParams;
use crate::tensor::{decayed_lr, Adam, Elem, Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Indices into a batch; anchor and positive share an identity, the
/// negative differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMode {
    Hard,
    SemiHard,
    All,
}

impl std::str::FromStr for MiningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MiningMode::Hard),
            "semi-hard" => Ok(MiningMode::SemiHard),
            "all" => Ok(MiningMode::All),
            _ => Err(Error::Config(format!(
                "unknown mining mode {s:?} (expected hard, semi-hard or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MiningConfig {
    /// Margin used both in the loss and in the semi-hard window.
    pub margin: f64,
    pub mode: MiningMode,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            margin: 0.02,
            mode: MiningMode::SemiHard,
            p: 8,
            k: 4,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("need P >= 2 identities and K >= 2 images each".into()));
        }
        Ok(())
    }
}

/// Mining output; `degenerate` flags a batch with fewer than two
/// identities, which cannot produce any triplet.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    pub degenerate: bool,
}

fn squared_distances<T: Elem>(embeddings: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, d) = embeddings.dims2()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = embeddings.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&embeddings.data()[j * d..(j + 1) * d])
                .map(|(&a, &b)| {
                    let diff = a.to_f64() - b.to_f64();
                    diff * diff
                })
                .sum();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    Ok(out)
}

/// Per-(anchor, positive) hardest-qualifying-negative mining.
pub fn mine_triplets<T: Elem>(
    embeddings: &Tensor<T>,
    labels: &[u32],
    config: &MiningConfig,
) -> Result<MiningOutcome> {
    let (n, _) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} embeddings vs {} labels",
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Ok(MiningOutcome {
            triplets: Vec::new(),
            degenerate: true,
        });
    }
    let d2 = squared_distances(embeddings)?;
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if a == p || labels[a] != labels[p] {
                continue;
            }
            let d_ap = d2[a * n + p];
            let mut best: Option<(f64, usize)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let d_an = d2[a * n + neg];
                let qualifies = match config.mode {
                    MiningMode::Hard => d_an < d_ap,
                    MiningMode::SemiHard => d_ap < d_an && d_an < d_ap + config.margin,
                    MiningMode::All => true,
                };
                if qualifies && best.map_or(true, |(b, _)| d_an < b) {
                    best = Some((d_an, neg));
                }
            }
            if let Some((_, neg)) = best {
                triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: neg,
                });
            }
        }
    }
    Ok(MiningOutcome {
        triplets,
        degenerate: false,
    })
}

/// Draw P distinct identities with K images each (with replacement when an
/// identity has fewer than K images). Returns sample indices into the
/// dataset and their labels.
pub fn sample_batch<T: Elem>(
    dataset: &Dataset<T>,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<u32>)> {
    if dataset.num_identities() < p {
        return Err(Error::Training(format!(
            "batch wants {p} identities, dataset has {}",
            dataset.num_identities()
        )));
    }
    let mut ids: Vec<u32> = dataset.identity_index.keys().copied().collect();
    ids.shuffle(rng);
    let mut indices = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for &id in &ids[..p] {
        let pool = &dataset.identity_index[&id];
        if pool.len() >= k {
            let mut shuffled = pool.clone();
            shuffled.shuffle(rng);
            indices.extend_from_slice(&shuffled[..k]);
        } else {
            for _ in 0..k {
                indices.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        labels.extend(std::iter::repeat(id).take(k));
    }
    Ok((indices, labels))
}

#[derive(Debug, Clone)]
pub struct TripletTrainConfig {
    pub epochs: usize,
    pub mining: MiningConfig,
    /// Patches selected per image.
    pub k_patches: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub verbose: bool,
}

impl Default for TripletTrainConfig {
    fn default() -> Self {
        TripletTrainConfig {
            epochs: 20,
            mining: MiningConfig::default(),
            k_patches: 8,
            initial_lr: 0.01,
            lr_decay: 0.96,
            seed: 0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mined (anchor, positive) pairs over all candidate pairs.
    pub active_fraction: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TripletTrainReport {
    pub epochs: Vec<TripletEpochRecord>,
    /// True when a full epoch mined nothing and training halted early.
    pub converged_early: bool,
}

/// Second-stage training: the global net stays frozen and provides the
/// attention pipeline; the local net minimizes the triplet loss over mined
/// triplets of aggregate patch embeddings.
pub fn train_triplet<T: Elem>(
    dataset: &Dataset<T>,
    global: &GlobalParams<T>,
    config: &TripletTrainConfig,
) -> Result<(LocalParams<T>, TripletTrainReport)> {
    config.mining.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    let in_channels = dataset.samples[0].pixels.shape()[0];
    let mut local = LocalParams::<T>::init(
        &crate::local::DEFAULT_BLOCK_FILTERS,
        in_channels,
        config.seed,
    );
    // frozen copy; eval-mode passes never touch its statistics
    let mut frozen_global = global.clone();

    let trainable = local.trainable_indices();
    let shapes: Vec<Vec<usize>> = {
        let named = local.named_tensors();
        trainable.iter().map(|&i| named[i].1.shape().to_vec()).collect()
    };
    let mut adam = Adam::new(&shapes, T::from_f64(config.initial_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let batches_per_epoch =
        (dataset.len() / (config.mining.p * config.mining.k)).max(1);
    let mut report = TripletTrainReport {
        epochs: Vec::new(),
        converged_early: false,
    };

    for epoch in 0..config.epochs {
        let lr = decayed_lr(config.initial_lr, config.lr_decay, epoch);
        adam.set_lr(T::from_f64(lr));
        let mut epoch_loss = 0.0;
        let mut mined_pairs = 0usize;
        let mut candidate_pairs = 0usize;
        for _ in 0..batches_per_epoch {
            let (indices, labels) =
                sample_batch(dataset, config.mining.p, config.mining.k, &mut rng)?;
            // attention pipeline per image, then one shared-weight pass
            // over every selected patch
            let mut all_patches = Vec::with_capacity(indices.len() * config.k_patches);
            for &i in &indices {
                let art = analyze(
                    &dataset.samples[i].pixels,
                    &mut frozen_global,
                    config.k_patches,
                )?;
                all_patches.extend(art.patches.patches);
            }
            let refs: Vec<&Tensor<T>> = all_patches.iter().collect();
            let batch = stack_images(&refs)?;
            let mut tape = Tape::new();
            let input = tape.leaf(batch, false);
            let (feats, param_vars) = local.forward(&mut tape, input, Mode::Train, true)?;
            let grouped = tape.mean_rows_grouped(feats, config.k_patches)?;
            let embeddings = tape.l2_normalize_rows(grouped)?;

            let outcome = mine_triplets(tape.value(embeddings), &labels, &config.mining)?;
            candidate_pairs += config.mining.p * config.mining.k * (config.mining.k - 1);
            mined_pairs += outcome.triplets.len();
            if outcome.triplets.is_empty() {
                continue;
            }
            let idx: Vec<(usize, usize, usize)> = outcome
                .triplets
                .iter()
                .map(|t| (t.anchor, t.positive, t.negative))
                .collect();
            let loss = tape.triplet_loss(embeddings, &idx, T::from_f64(config.mining.margin))?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item().to_f64();

            let grads: Vec<Tensor<T>> = param_vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
                })
                .collect();
            let mut named = local.named_tensors_mut();
            let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(trainable.len());
            for (i, (_, t)) in named.iter_mut().enumerate() {
                if trainable.contains(&i) {
                    refs.push(*t);
                }
            }
            adam.step(&mut refs, &grads)?;
        }
        let record = TripletEpochRecord {
            epoch,
            loss: epoch_loss / batches_per_epoch as f64,
            active_fraction: mined_pairs as f64 / candidate_pairs.max(1) as f64,
            lr,
        };
        if config.verbose {
            println!(
                "epoch={} loss={:.6} active={:.4} lr={:.6}",
                record.epoch, record.loss, record.active_fraction, record.lr
            );
        }
        report.epochs.push(record);
        if mined_pairs == 0 {
            eprintln!("warning: no triplets mined over a full epoch; treating as converged");
            report.converged_early = true;
            break;
        }
    }
    Ok((local, report))
}
