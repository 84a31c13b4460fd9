//! Global attention network: a two-convolution classifier over the whole
//! image whose entropy gradient yields the attention map.
//!
//! Pipeline: conv 7x7/stride 2 (12 filters) -> BN -> ReLU -> conv 3x3 (24
//! filters) -> BN -> ReLU -> maxpool 7/7, for a total downsampling of 14.
//! The head applies one dense layer per grid cell (as a 1x1 convolution),
//! max-pools the logit grid spatially and ends in a softmax. Saliency of a
//! grid cell is the L2 norm of the gradient of the output entropy with
//! respect to that cell's feature vector, computed in one backward pass.

use crate::data::{augment, stack_images, Dataset, ImageSample, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{decayed_lr, Adam, BnStats, Elem, Mode, Tape, Tensor, VarId, PROB_FLOOR};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONV1_FILTERS: usize = 12;
pub const CONV2_FILTERS: usize = 24;
/// Channel count of a feature-grid cell vector.
pub const GRID_CHANNELS: usize = CONV2_FILTERS;

/// One convolution with its batch-norm parameters.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BnStats<T>,
}

impl<T: Elem> ConvBn<T> {
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        ConvBn {
            weight: Tensor::randn(&[out_ch, in_ch, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
            gamma: Tensor::full(&[out_ch], T::one()),
            beta: Tensor::zeros(&[out_ch]),
            stats: BnStats::new(out_ch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalParams<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    /// Per-cell dense head as a 1x1 convolution: C x 24 x 1 x 1.
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl<T: Elem> GlobalParams<T> {
    pub fn init(num_classes: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GlobalParams {
            conv1: ConvBn::init(CONV1_FILTERS, in_channels, 7, &mut rng),
            conv2: ConvBn::init(CONV2_FILTERS, CONV1_FILTERS, 3, &mut rng),
            head_w: Tensor::randn(
                &[num_classes, GRID_CHANNELS, 1, 1],
                (2.0 / GRID_CHANNELS as f64).sqrt(),
                &mut rng,
            ),
            head_b: Tensor::zeros(&[num_classes]),
            num_classes,
            in_channels,
        }
    }

    /// Trainable tensors in a fixed (name, tensor) order shared by the
    /// optimizer and the checkpoint format. Batch-norm running statistics
    /// are included for persistence but are not optimized.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("global.conv1.weight".into(), &self.conv1.weight),
            ("global.conv1.bias".into(), &self.conv1.bias),
            ("global.bn1.gamma".into(), &self.conv1.gamma),
            ("global.bn1.beta".into(), &self.conv1.beta),
            ("global.bn1.running_mean".into(), &self.conv1.stats.mean),
            ("global.bn1.running_var".into(), &self.conv1.stats.var),
            ("global.conv2.weight".into(), &self.conv2.weight),
            ("global.conv2.bias".into(), &self.conv2.bias),
            ("global.bn2.gamma".into(), &self.conv2.gamma),
            ("global.bn2.beta".into(), &self.conv2.beta),
            ("global.bn2.running_mean".into(), &self.conv2.stats.mean),
            ("global.bn2.running_var".into(), &self.conv2.stats.var),
            ("global.head.weight".into(), &self.head_w),
            ("global.head.bias".into(), &self.head_b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("global.conv1.weight".into(), &mut self.conv1.weight),
            ("global.conv1.bias".into(), &mut self.conv1.bias),
            ("global.bn1.gamma".into(), &mut self.conv1.gamma),
            ("global.bn1.beta".into(), &mut self.conv1.beta),
            ("global.bn1.running_mean".into(), &mut self.conv1.stats.mean),
            ("global.bn1.running_var".into(), &mut self.conv1.stats.var),
            ("global.conv2.weight".into(), &mut self.conv2.weight),
            ("global.conv2.bias".into(), &mut self.conv2.bias),
            ("global.bn2.gamma".into(), &mut self.conv2.gamma),
            ("global.bn2.beta".into(), &mut self.conv2.beta),
            ("global.bn2.running_mean".into(), &mut self.conv2.stats.mean),
            ("global.bn2.running_var".into(), &mut self.conv2.stats.var),
            ("global.head.weight".into(), &mut self.head_w),
            ("global.head.bias".into(), &mut self.head_b),
        ]
    }

    /// Indices into `named_tensors` of the optimized subset.
    pub fn trainable_indices() -> Vec<usize> {
        vec![0, 1, 2, 3, 6, 7, 8, 9, 12, 13]
    }
}

/// Tape handles of the bound parameters.
pub struct GlobalVars {
    pub conv1_w: VarId,
    pub conv1_b: VarId,
    pub bn1_g: VarId,
    pub bn1_b: VarId,
    pub conv2_w: VarId,
    pub conv2_b: VarId,
    pub bn2_g: VarId,
    pub bn2_b: VarId,
    pub head_w: VarId,
    pub head_b: VarId,
}

/// Forward activations of one pass.
pub struct GlobalActivations {
    pub vars: GlobalVars,
    /// B x 24 x d1 x d2
    pub grid: VarId,
    /// B x C
    pub probs: VarId,
}

impl<T: Elem> GlobalParams<T> {
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GlobalVars {
        GlobalVars {
            conv1_w: tape.leaf(self.conv1.weight.clone(), trainable),
            conv1_b: tape.leaf(self.conv1.bias.clone(), trainable),
            bn1_g: tape.leaf(self.conv1.gamma.clone(), trainable),
            bn1_b: tape.leaf(self.conv1.beta.clone(), trainable),
            conv2_w: tape.leaf(self.conv2.weight.clone(), trainable),
            conv2_b: tape.leaf(self.conv2.bias.clone(), trainable),
            bn2_g: tape.leaf(self.conv2.gamma.clone(), trainable),
            bn2_b: tape.leaf(self.conv2.beta.clone(), trainable),
            head_w: tape.leaf(self.head_w.clone(), trainable),
            head_b: tape.leaf(self.head_b.clone(), trainable),
        }
    }

    /// Full forward pass on `tape`. Input must be B x in_ch x H x W with H
    /// and W multiples of 14. Train mode updates the running batch-norm
    /// statistics in `self`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: VarId,
        mode: Mode,
        trainable: bool,
    ) -> Result<GlobalActivations> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "global net expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(Error::Shape(format!(
                "image dimensions {h}x{w} are not multiples of {PATCH_SIZE}; resize at ingestion"
            )));
        }
        let vars = self.bind(tape, trainable);
        let x = tape.conv2d(input, vars.conv1_w, vars.conv1_b, 2, 3)?;
        let x = tape.batchnorm(x, vars.bn1_g, vars.bn1_b, &mut self.conv1.stats, mode)?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, vars.conv2_w, vars.conv2_b, 1, 1)?;
        let x = tape.batchnorm(x, vars.bn2_g, vars.bn2_b, &mut self.conv2.stats, mode)?;
        let x = tape.relu(x)?;
        let grid = tape.maxpool2d(x, 7, 7)?;
        let probs = self.head(tape, grid, &vars)?;
        Ok(GlobalActivations { vars, grid, probs })
    }

    /// Classification head from a feature grid: per-cell dense, spatial max
    /// pooling over the logit grid, softmax.
    pub fn head(&self, tape: &mut Tape<T>, grid: VarId, vars: &GlobalVars) -> Result<VarId> {
        let logit_grid = tape.conv2d(grid, vars.head_w, vars.head_b, 1, 0)?;
        let logits = tape.spatial_max(logit_grid)?;
        tape.softmax(logits)
    }
}

/// The global representation of one image: a d1 x d2 grid of D-dimensional
/// cell vectors, stored channels-first as produced by the network.
#[derive(Debug, Clone)]
pub struct FeatureGrid<T> {
    /// D x d1 x d2
    pub tensor: Tensor<T>,
    pub image_height: usize,
    pub image_width: usize,
}

impl<T: Elem> FeatureGrid<T> {
    pub fn rows(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn cell(&self, i: usize, j: usize) -> Vec<T> {
        let (d1, d2) = (self.rows(), self.cols());
        debug_assert!(i < d1 && j < d2);
        (0..self.channels())
            .map(|c| self.tensor.data()[(c * d1 + i) * d2 + j])
            .collect()
    }

    /// Flatten cells row-major with the D channel values contiguous per cell.
    pub fn flatten_cells(&self) -> Vec<T> {
        let (d1, d2, d) = (self.rows(), self.cols(), self.channels());
        let mut out = Vec::with_capacity(d1 * d2 * d);
        for i in 0..d1 {
            for j in 0..d2 {
                for c in 0..d {
                    out.push(self.tensor.data()[(c * d1 + i) * d2 + j]);
                }
            }
        }
        out
    }
}

/// Output distribution over the training identities.
#[derive(Debug, Clone)]
pub struct ClassDistribution<T> {
    pub probs: Vec<T>,
}

impl<T: Elem> ClassDistribution<T> {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.probs.iter().enumerate() {
            if v > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Negative Shannon entropy as the saliency functional: `sum h * log h`
/// with the probability clamped at 1e-12 inside the log. Exactly zero on
/// one-hot inputs, bounded below by -log C.
pub fn entropy<T: Elem>(dist: &ClassDistribution<T>) -> T {
    let floor = T::from_f64(PROB_FLOOR);
    dist.probs
        .iter()
        .map(|&h| h * h.max(floor).ln())
        .sum()
}

/// Grid of non-negative saliency values, one per feature-grid cell.
#[derive(Debug, Clone)]
pub struct AttentionMap<T> {
    /// d1 x d2
    pub values: Tensor<T>,
}

impl<T: Elem> AttentionMap<T> {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    /// Max-normalized export to [0, 255] as a binary PGM.
    pub fn save_pgm(&self, path: &std::path::Path) -> Result<()> {
        let max = self
            .values
            .data()
            .iter()
            .copied()
            .fold(T::zero(), T::max);
        let scale = if max > T::zero() { T::one() / max } else { T::zero() };
        let img = Tensor::from_vec(
            &[1, self.rows(), self.cols()],
            self.values.data().iter().map(|&v| v * scale).collect(),
        )?;
        crate::data::pnm::encode_pgm(&img, path)
    }
}

/// The k selected grid positions with their pixel rectangles and patches.
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    /// grid positions (i, j), strongest first
    pub positions: Vec<(usize, usize)>,
    /// extracted pixel patches, in_ch x 14 x 14 each
    pub patches: Vec<Tensor<T>>,
}

impl<T: Elem> PatchSet<T> {
    pub fn empty() -> Self {
        PatchSet {
            positions: Vec::new(),
            patches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Pixel rectangle of the p-th patch as (y, x, h, w).
    pub fn rect(&self, p: usize) -> (usize, usize, usize, usize) {
        let (i, j) = self.positions[p];
        (i * PATCH_SIZE, j * PATCH_SIZE, PATCH_SIZE, PATCH_SIZE)
    }
}

/// Positions of the k largest attention values, ties broken by row-major
/// grid order, with the aligned 14x14 pixel patches extracted.
pub fn select_patches<T: Elem>(
    map: &AttentionMap<T>,
    image: &Tensor<T>,
    k: usize,
) -> Result<PatchSet<T>> {
    let (d1, d2) = (map.rows(), map.cols());
    if k < 1 || k > d1 * d2 {
        return Err(Error::Shape(format!(
            "k = {k} outside 1..={} candidate cells",
            d1 * d2
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 || shape[1] < d1 * PATCH_SIZE || shape[2] < d2 * PATCH_SIZE {
        return Err(Error::Shape(format!(
            "image {:?} does not cover a {d1}x{d2} grid of {PATCH_SIZE}px cells",
            shape
        )));
    }
    let mut order: Vec<usize> = (0..d1 * d2).collect();
    order.sort_by(|&a, &b| {
        map.values.data()[b]
            .partial_cmp(&map.values.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let positions: Vec<(usize, usize)> = order[..k].iter().map(|&idx| (idx / d2, idx % d2)).collect();
    let patches = positions
        .iter()
        .map(|&(i, j)| extract_patch(image, i * PATCH_SIZE, j * PATCH_SIZE))
        .collect();
    Ok(PatchSet { positions, patches })
}

fn extract_patch<T: Elem>(image: &Tensor<T>, y: usize, x: usize) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(c * PATCH_SIZE * PATCH_SIZE);
    for ch in 0..c {
        for dy in 0..PATCH_SIZE {
            let row = (ch * h + y + dy) * w + x;
            data.extend_from_slice(&image.data()[row..row + PATCH_SIZE]);
        }
    }
    Tensor::from_vec(&[c, PATCH_SIZE, PATCH_SIZE], data).unwrap()
}

/// Everything the attention pass produces for one image.
pub struct AttentionArtifacts<T> {
    pub grid: FeatureGrid<T>,
    pub distribution: ClassDistribution<T>,
    pub entropy: T,
    pub map: AttentionMap<T>,
    pub patches: PatchSet<T>,
    /// Reverse traversals used to compute the map (always 1).
    pub backward_runs: usize,
}

/// Run the global net in eval mode on one image (in_ch x H x W), compute
/// the entropy-gradient attention map with a single backward pass, and
/// select the top-k patches. `k = 0` skips selection.
pub fn analyze<T: Elem>(
    image: &Tensor<T>,
    params: &mut GlobalParams<T>,
    k: usize,
) -> Result<AttentionArtifacts<T>> {
    analyze_opts(image, params, k, false)
}

/// As [`analyze`], optionally replacing the entropy H by -H. The attention
/// map is a gradient norm, so the sign must not matter.
pub fn analyze_opts<T: Elem>(
    image: &Tensor<T>,
    params: &mut GlobalParams<T>,
    k: usize,
    negate_entropy: bool,
) -> Result<AttentionArtifacts<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected C x H x W image, got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut tape = Tape::new();
    let batch = image.clone().reshaped(&[1, shape[0], h, w])?;
    // gradients must reach the feature grid, so the input carries the
    // requires_grad flag while the parameters stay frozen
    let input = tape.leaf(batch, true);
    let acts = params.forward(&mut tape, input, Mode::Eval, false)?;
    let entropy_var = entropy_on_tape(&mut tape, acts.probs)?;
    let loss = if negate_entropy {
        tape.scale(entropy_var, -T::one())?
    } else {
        entropy_var
    };
    tape.backward(loss)?;

    let grid_value = tape.value(acts.grid).clone();
    let (_, d, d1, d2) = grid_value.dims4()?;
    let grid = FeatureGrid {
        tensor: grid_value.reshaped(&[d, d1, d2])?,
        image_height: h,
        image_width: w,
    };
    let grad = tape
        .grad(acts.grid)
        .ok_or_else(|| Error::Autodiff("no gradient reached the feature grid".into()))?;
    let mut values = vec![T::zero(); d1 * d2];
    for c in 0..d {
        for cell in 0..d1 * d2 {
            let g = grad.data()[c * d1 * d2 + cell];
            values[cell] += g * g;
        }
    }
    for v in &mut values {
        *v = v.sqrt();
    }
    let map = AttentionMap {
        values: Tensor::from_vec(&[d1, d2], values)?,
    };
    let distribution = ClassDistribution {
        probs: tape.value(acts.probs).data().to_vec(),
    };
    let ent = entropy(&distribution);
    let patches = if k == 0 {
        PatchSet::empty()
    } else {
        select_patches(&map, image, k)?
    };
    Ok(AttentionArtifacts {
        grid,
        distribution,
        entropy: ent,
        map,
        patches,
        backward_runs: tape.backward_runs(),
    })
}

/// Entropy functional recorded on a tape: `sum p * log(clamp(p))`.
pub fn entropy_on_tape<T: Elem>(tape: &mut Tape<T>, probs: VarId) -> Result<VarId> {
    let logs = tape.ln_clamped(probs, T::from_f64(PROB_FLOOR))?;
    let prod = tape.mul(probs, logs)?;
    tape.sum(prod)
}

/// Single-image eval-mode forward: feature grid and class distribution.
pub fn global_forward<T: Elem>(
    image: &Tensor<T>,
    params: &mut GlobalParams<T>,
) -> Result<(FeatureGrid<T>, ClassDistribution<T>)> {
    let shape = image.shape().to_vec();
    let mut tape = Tape::new();
    let input = tape.leaf(
        image.clone().reshaped(&[1, shape[0], shape[1], shape[2]])?,
        false,
    );
    let acts = params.forward(&mut tape, input, Mode::Eval, false)?;
    let grid_value = tape.value(acts.grid).clone();
    let (_, d, d1, d2) = grid_value.dims4()?;
    Ok((
        FeatureGrid {
            tensor: grid_value.reshaped(&[d, d1, d2])?,
            image_height: shape[1],
            image_width: shape[2],
        },
        ClassDistribution {
            probs: tape.value(acts.probs).data().to_vec(),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct GlobalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Stop once training accuracy reaches this level (1.0 plus epsilon
    /// disables early stopping).
    pub target_accuracy: f64,
}

impl Default for GlobalTrainConfig {
    fn default() -> Self {
        GlobalTrainConfig {
            epochs: 40,
            batch_size: 32,
            initial_lr: 0.01,
            lr_decay: 0.998,
            seed: 0,
            augment: true,
            target_accuracy: 1.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalTrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_accuracy: f64,
    pub num_classes: usize,
}

/// Train the global net with mean cross-entropy and Adam under exponential
/// learning-rate decay. Deterministic given the seed.
pub fn train_global<T: Elem>(
    dataset: &Dataset<T>,
    config: &GlobalTrainConfig,
) -> Result<(GlobalParams<T>, GlobalTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    let num_classes = dataset.num_identities();
    if num_classes < 2 {
        return Err(Error::Training(format!(
            "need at least 2 identities, got {num_classes}"
        )));
    }
    let in_channels = dataset.samples[0].pixels.shape()[0];
    let mut params = GlobalParams::<T>::init(num_classes, in_channels, config.seed);
    let labels: Vec<usize> = dataset
        .samples
        .iter()
        .map(|s| dataset.class_of(s.identity))
        .collect();

    let trainable = GlobalParams::<T>::trainable_indices();
    let shapes: Vec<Vec<usize>> = {
        let named = params.named_tensors();
        trainable.iter().map(|&i| named[i].1.shape().to_vec()).collect()
    };
    let mut adam = Adam::new(&shapes, T::from_f64(config.initial_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.set_lr(T::from_f64(decayed_lr(
            config.initial_lr,
            config.lr_decay,
            epoch,
        )));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<ImageSample<T>> = chunk
                .iter()
                .map(|&i| {
                    // augment half of the samples: the clean half anchors
                    // the classification task while the augmented half
                    // forces shift and flip robustness
                    if config.augment && rng.random_bool(0.5) {
                        augment(&dataset.samples[i], &mut rng)
                    } else {
                        dataset.samples[i].clone()
                    }
                })
                .collect();
            let images: Vec<&Tensor<T>> = augmented.iter().map(|s| &s.pixels).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = stack_images(&images)?;
            let mut tape = Tape::new();
            let input = tape.leaf(batch, false);
            let acts = params.forward(&mut tape, input, Mode::Train, true)?;
            let loss = tape.cross_entropy(acts.probs, &batch_labels)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item().to_f64();
            batches += 1;

            let probs = tape.value(acts.probs);
            for (r, &label) in batch_labels.iter().enumerate() {
                let row = &probs.data()[r * num_classes..(r + 1) * num_classes];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == label {
                    correct += 1;
                }
            }

            let var_list = [
                acts.vars.conv1_w,
                acts.vars.conv1_b,
                acts.vars.bn1_g,
                acts.vars.bn1_b,
                acts.vars.conv2_w,
                acts.vars.conv2_b,
                acts.vars.bn2_g,
                acts.vars.bn2_b,
                acts.vars.head_w,
                acts.vars.head_b,
            ];
            let grads: Vec<Tensor<T>> = var_list
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
                })
                .collect();
            {
                let mut named = params.named_tensors_mut();
                let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(trainable.len());
                for (idx, (_, t)) in named.iter_mut().enumerate() {
                    if trainable.contains(&idx) {
                        refs.push(*t);
                    }
                }
                adam.step(&mut refs, &grads)?;
            }
        }
        epoch_losses.push(epoch_loss / batches as f64);
        let train_acc = correct as f64 / dataset.len() as f64;
        // confirm in eval mode: early in training the batch-norm running
        // statistics lag the batch statistics the train accuracy was
        // measured with
        if train_acc >= config.target_accuracy
            && classification_accuracy(dataset, &mut params)? >= config.target_accuracy
        {
            break;
        }
    }

    let final_accuracy = classification_accuracy(dataset, &mut params)?;
    Ok((
        params,
        GlobalTrainReport {
            epoch_losses,
            final_accuracy,
            num_classes,
        },
    ))
}

/// Eval-mode classification accuracy over a dataset.
pub fn classification_accuracy<T: Elem>(
    dataset: &Dataset<T>,
    params: &mut GlobalParams<T>,
) -> Result<f64> {
    let mut correct = 0usize;
    for s in &dataset.samples {
        let (_, dist) = global_forward(&s.pixels, params)?;
        if dist.argmax() == dataset.class_of(s.identity) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
