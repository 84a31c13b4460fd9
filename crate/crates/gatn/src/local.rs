//! Local high-resolution embedding network: a small CNN with terminal
//! global average pooling, applied independently to each selected patch
//! with shared weights. Global average pooling makes it size-agnostic, so
//! the same parameters run on 14x14 patches and on whole images.

use crate::error::{Error, Result};
use crate::global::{ConvBn, PatchSet};
use crate::tensor::{Elem, Mode, Tape, Tensor, VarId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Filter counts of the default three conv blocks; the last one is the
/// embedding dimension, matched to the global grid channel count so that
/// fusion needs no projection.
pub const DEFAULT_BLOCK_FILTERS: [usize; 3] = [32, 64, 24];
/// A 2x2 max pool follows this block (0-based).
const POOL_AFTER_BLOCK: usize = 0;
const KERNEL: usize = 3;
/// Initial batch-norm scale of the final block. Average pooling shrinks
/// post-ReLU activations to roughly 0.4 per channel while the global
/// grid's 7x7 max pooling concentrates them near 2; scaling the last
/// gamma at 5 puts raw patch features and grid cells on a common scale so
/// fusion by replacement is commensurate from the outset.
const FINAL_GAMMA: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct LocalParams<T> {
    pub blocks: Vec<ConvBn<T>>,
    pub in_channels: usize,
}

impl<T: Elem> LocalParams<T> {
    pub fn init(block_filters: &[usize], in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(block_filters.len());
        let mut prev = in_channels;
        for &filters in block_filters {
            blocks.push(ConvBn::init(filters, prev, KERNEL, &mut rng));
            prev = filters;
        }
        if let Some(last) = blocks.last_mut() {
            for g in last.gamma.data_mut() {
                *g = T::from_f64(FINAL_GAMMA);
            }
        }
        LocalParams { blocks, in_channels }
    }

    /// Output embedding dimension.
    pub fn embed_dim(&self) -> usize {
        self.blocks.last().map(|b| b.weight.shape()[0]).unwrap_or(0)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("local.block{i}.conv.weight"), &b.weight));
            out.push((format!("local.block{i}.conv.bias"), &b.bias));
            out.push((format!("local.block{i}.bn.gamma"), &b.gamma));
            out.push((format!("local.block{i}.bn.beta"), &b.beta));
            out.push((format!("local.block{i}.bn.running_mean"), &b.stats.mean));
            out.push((format!("local.block{i}.bn.running_var"), &b.stats.var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("local.block{i}.conv.weight"), &mut b.weight));
            out.push((format!("local.block{i}.conv.bias"), &mut b.bias));
            out.push((format!("local.block{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("local.block{i}.bn.beta"), &mut b.beta));
            out.push((format!("local.block{i}.bn.running_mean"), &mut b.stats.mean));
            out.push((format!("local.block{i}.bn.running_var"), &mut b.stats.var));
        }
        out
    }

    /// Indices into `named_tensors` of the optimized subset (running stats
    /// excluded).
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .flat_map(|i| (0..4).map(move |j| i * 6 + j))
            .collect()
    }

    /// Forward a batch of inputs (B x in_ch x H x W) to per-input features
    /// (B x D). Returns the feature var and the bound parameter vars in
    /// `named_tensors` order (stats slots are paired with their gamma var
    /// only for ordering; they carry no tape handle).
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: VarId,
        mode: Mode,
        trainable: bool,
    ) -> Result<(VarId, Vec<VarId>)> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "local net expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if h < 4 || w < 4 {
            return Err(Error::Shape(format!(
                "local net needs spatial extent >= 4x4, got {h}x{w}"
            )));
        }
        let mut x = input;
        let mut param_vars = Vec::with_capacity(self.blocks.len() * 4);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let wv = tape.leaf(block.weight.clone(), trainable);
            let bv = tape.leaf(block.bias.clone(), trainable);
            let gv = tape.leaf(block.gamma.clone(), trainable);
            let betav = tape.leaf(block.beta.clone(), trainable);
            param_vars.extend_from_slice(&[wv, bv, gv, betav]);
            x = tape.conv2d(x, wv, bv, 1, 1)?;
            x = tape.batchnorm(x, gv, betav, &mut block.stats, mode)?;
            x = tape.relu(x)?;
            if i == POOL_AFTER_BLOCK {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        let feats = tape.global_avg_pool(x)?;
        Ok((feats, param_vars))
    }
}

/// Fixed-length descriptor with unit L2 norm.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub vector: Vec<T>,
}

impl<T: Elem> Embedding<T> {
    pub fn from_raw(mut vector: Vec<T>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !norm.is_finite() || norm == T::zero() {
            return Err(Error::Shape("cannot normalize a zero or non-finite vector".into()));
        }
        for v in &mut vector {
            *v = *v / norm;
        }
        Ok(Embedding { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Per-patch features (k x D, un-normalized, for fusion) plus the
/// normalized mean aggregate used by the triplet loss and for ranking.
pub struct PatchEmbedding<T> {
    pub per_patch: Vec<Vec<T>>,
    pub aggregate: Embedding<T>,
}

/// Embed every patch independently with shared weights; the aggregate is
/// the L2-normalized mean of the per-patch features.
pub fn embed_patches<T: Elem>(
    patches: &PatchSet<T>,
    params: &mut LocalParams<T>,
) -> Result<PatchEmbedding<T>> {
    if patches.is_empty() {
        return Err(Error::Shape("cannot embed an empty patch set".into()));
    }
    let refs: Vec<&Tensor<T>> = patches.patches.iter().collect();
    let batch = crate::data::stack_images(&refs)?;
    let mut tape = Tape::new();
    let input = tape.leaf(batch, false);
    let (feats, _) = params.forward(&mut tape, input, Mode::Eval, false)?;
    let d = params.embed_dim();
    let data = tape.value(feats).data();
    let per_patch: Vec<Vec<T>> = (0..patches.len())
        .map(|i| data[i * d..(i + 1) * d].to_vec())
        .collect();
    let mut mean = vec![T::zero(); d];
    let inv = T::one() / T::from_f64(patches.len() as f64);
    for row in &per_patch {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v * inv;
        }
    }
    Ok(PatchEmbedding {
        per_patch,
        aggregate: Embedding::from_raw(mean)?,
    })
}

/// Multiply-accumulate count for one eval forward of the local net on an
/// input of the given pixel extent.
pub fn flops_estimate<T: Elem>(params: &LocalParams<T>, height: usize, width: usize) -> u64 {
    let mut h = height as u64;
    let mut w = width as u64;
    let mut macs = 0u64;
    for (i, block) in params.blocks.iter().enumerate() {
        let (oc, ic, kh, kw) = (
            block.weight.shape()[0] as u64,
            block.weight.shape()[1] as u64,
            block.weight.shape()[2] as u64,
            block.weight.shape()[3] as u64,
        );
        // stride 1, pad 1 keeps the spatial extent
        macs += h * w * oc * ic * kh * kw;
        if i == POOL_AFTER_BLOCK {
            h /= 2;
            w /= 2;
        }
    }
    macs
}
