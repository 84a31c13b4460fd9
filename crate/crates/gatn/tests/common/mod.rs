//! Shared finite-difference gradient-checking machinery used by both the
//! `gradcheck` and `acceptance` integration-test targets.
//!
//! Every analytic gradient produced by the reverse sweep is compared against
//! a 64-bit central difference (step 1e-5) with a relative-error bound of
//! 1e-5.
#![allow(dead_code)]

use gatn::global::{entropy_on_tape, GlobalParams};
use gatn::local::LocalParams;
use gatn::tensor::{BnStats, Mode, Tape, Tensor, VarId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;


fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values with pairwise gaps far larger than the FD step, so max-pooling
/// argmaxes cannot flip under perturbation.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let data = idx
        .iter()
        .map(|&i| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Away-from-zero values so ReLU kinks cannot flip under perturbation.
fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Checks the reverse-mode gradient of a scalar graph against central
/// finite differences over every element of every input.
fn check_grads(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    ctx: &str,
) {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    assert!(tape.value(loss).is_scalar(), "{ctx}: loss must be scalar");
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<VarId> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &ids);
        t.value(l).item()
    };
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let ad = grads[ti].data()[e];
            assert!(
                rel_err(ad, fd) <= TOL,
                "{ctx}: input {ti} elem {e}: analytic {ad} vs finite-difference {fd}"
            );
        }
    }
}

/// Central difference that reports `None` when halving the step changes the
/// estimate, which flags a ReLU or max kink inside the probed interval; the
/// network-level checks skip those coordinates (the per-op tests construct
/// inputs with no kink nearby, so they never need to).
fn fd_checked(mut eval: impl FnMut(f64) -> f64, base: f64) -> Option<f64> {
    let mut fd = |h: f64| (eval(base + h) - eval(base - h)) / (2.0 * h);
    let f1 = fd(STEP);
    let f2 = fd(2.0 * STEP);
    if rel_err(f1, f2) > 1e-6 {
        return None;
    }
    Some(f1)
}

/// Reduces a tensor-valued output to a scalar via a fixed random weighting,
/// so the whole Jacobian is probed rather than just row sums.
fn weighted(tape: &mut Tape<f64>, out: VarId, w: &Tensor<f64>) -> VarId {
    let wv = tape.leaf(w.clone(), false);
    let m = tape.mul(out, wv).unwrap();
    tape.sum(m).unwrap()
}

pub fn grad_add_sub_mul_scale(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..instances {
        let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let w = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let c = rng.random_range(-2.0..2.0);
        let s = rng.random_range(-2.0..2.0);
        check_grads(
            &[a.clone(), b.clone()],
            &|t, ids| {
                let x = t.add(ids[0], ids[1]).unwrap();
                weighted(t, x, &w)
            },
            "add",
        );
        check_grads(
            &[a.clone(), b.clone()],
            &|t, ids| {
                let x = t.sub(ids[0], ids[1]).unwrap();
                weighted(t, x, &w)
            },
            "sub",
        );
        check_grads(
            &[a.clone(), b.clone()],
            &|t, ids| {
                let x = t.mul(ids[0], ids[1]).unwrap();
                weighted(t, x, &w)
            },
            "mul",
        );
        check_grads(
            &[a.clone()],
            &|t, ids| {
                let x = t.scale(ids[0], c).unwrap();
                weighted(t, x, &w)
            },
            "scale",
        );
        check_grads(
            &[a],
            &|t, ids| {
                let x = t.add_scalar(ids[0], s).unwrap();
                weighted(t, x, &w)
            },
            "add_scalar",
        );
    }
}

pub fn grad_sum_mean(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..instances {
        let a = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        check_grads(&[a.clone()], &|t, ids| t.sum(ids[0]).unwrap(), "sum");
        check_grads(&[a], &|t, ids| t.mean(ids[0]).unwrap(), "mean");
    }
}

pub fn grad_relu_ln(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..instances {
        let a = signed(&[2, 5], &mut rng);
        let w = uniform(&[2, 5], -1.0, 1.0, &mut rng);
        check_grads(
            &[a],
            &|t, ids| {
                let x = t.relu(ids[0]).unwrap();
                weighted(t, x, &w)
            },
            "relu",
        );
        let p = uniform(&[2, 5], 0.05, 1.0, &mut rng);
        check_grads(
            &[p],
            &|t, ids| {
                let x = t.ln_clamped(ids[0], 1e-12).unwrap();
                weighted(t, x, &w)
            },
            "ln_clamped",
        );
    }
}

pub fn grad_dense(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..instances {
        let x = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let b = uniform(&[2], -1.0, 1.0, &mut rng);
        let wt = uniform(&[3, 2], -1.0, 1.0, &mut rng);
        check_grads(
            &[x, w, b],
            &|t, ids| {
                let y = t.dense(ids[0], ids[1], ids[2]).unwrap();
                weighted(t, y, &wt)
            },
            "dense",
        );
    }
}

pub fn grad_conv2d(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for k in 0..instances {
        let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 3)][k % 4];
        let kernel = if pad == 3 { 7 } else { 3 };
        let x = uniform(&[1, 2, 8, 7], -1.0, 1.0, &mut rng);
        let w = uniform(&[2, 2, kernel, kernel], -1.0, 1.0, &mut rng);
        let b = uniform(&[2], -1.0, 1.0, &mut rng);
        let out_h = (8 + 2 * pad - kernel) / stride + 1;
        let out_w = (7 + 2 * pad - kernel) / stride + 1;
        let wt = uniform(&[1, 2, out_h, out_w], -1.0, 1.0, &mut rng);
        check_grads(
            &[x, w, b],
            &|t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
                weighted(t, y, &wt)
            },
            "conv2d",
        );
    }
}

pub fn grad_pooling(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for k in 0..instances {
        let (win, stride) = [(2, 2), (3, 3), (2, 1), (3, 2)][k % 4];
        let x = separated(&[1, 2, 6, 6], &mut rng);
        let out = (6 - win) / stride + 1;
        let wt = uniform(&[1, 2, out, out], -1.0, 1.0, &mut rng);
        check_grads(
            &[x.clone()],
            &|t, ids| {
                let y = t.maxpool2d(ids[0], win, stride).unwrap();
                weighted(t, y, &wt)
            },
            "maxpool2d",
        );
        let wt2 = uniform(&[1, 2], -1.0, 1.0, &mut rng);
        check_grads(
            &[x.clone()],
            &|t, ids| {
                let y = t.spatial_max(ids[0]).unwrap();
                weighted(t, y, &wt2)
            },
            "spatial_max",
        );
        let xg = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let wt3 = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        check_grads(
            &[xg],
            &|t, ids| {
                let y = t.global_avg_pool(ids[0]).unwrap();
                weighted(t, y, &wt3)
            },
            "global_avg_pool",
        );
    }
}

pub fn grad_softmax_cross_entropy(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..instances {
        let z = uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let wt = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        check_grads(
            &[z.clone()],
            &|t, ids| {
                let p = t.softmax(ids[0]).unwrap();
                weighted(t, p, &wt)
            },
            "softmax",
        );
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        check_grads(
            &[z],
            &|t, ids| {
                let p = t.softmax(ids[0]).unwrap();
                t.cross_entropy(p, &labels).unwrap()
            },
            "cross_entropy",
        );
    }
}

pub fn grad_batchnorm(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for k in 0..instances {
        let mode = if k % 2 == 0 { Mode::Train } else { Mode::Eval };
        let x = uniform(&[2, 3, 2, 3], -1.0, 1.0, &mut rng);
        let gamma = uniform(&[3], 0.5, 1.5, &mut rng);
        let beta = uniform(&[3], -0.5, 0.5, &mut rng);
        let wt = uniform(&[2, 3, 2, 3], -1.0, 1.0, &mut rng);
        check_grads(
            &[x, gamma, beta],
            &|t, ids| {
                let mut stats = BnStats::new(3);
                let y = t
                    .batchnorm(ids[0], ids[1], ids[2], &mut stats, mode)
                    .unwrap();
                weighted(t, y, &wt)
            },
            "batchnorm",
        );
    }
}

pub fn grad_rows_ops(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..instances {
        let x = uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let wt = uniform(&[2, 4], -1.0, 1.0, &mut rng);
        check_grads(
            &[x],
            &|t, ids| {
                let y = t.mean_rows_grouped(ids[0], 3).unwrap();
                weighted(t, y, &wt)
            },
            "mean_rows_grouped",
        );
        let xr = signed(&[3, 4], &mut rng);
        let wt2 = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        check_grads(
            &[xr],
            &|t, ids| {
                let y = t.l2_normalize_rows(ids[0]).unwrap();
                weighted(t, y, &wt2)
            },
            "l2_normalize_rows",
        );
    }
}

pub fn grad_triplet_loss(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let triplets = [(0usize, 1usize, 2usize), (3, 4, 5), (0, 3, 5)];
    let margin = 0.2;
    let mut done = 0;
    while done < instances {
        let e = uniform(&[6, 3], -1.0, 1.0, &mut rng);
        // keep every hinge comfortably away from its kink
        let d2 = |a: usize, b: usize| -> f64 {
            e.data()[a * 3..a * 3 + 3]
                .iter()
                .zip(&e.data()[b * 3..b * 3 + 3])
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        if triplets
            .iter()
            .any(|&(a, p, n)| (d2(a, p) - d2(a, n) + margin).abs() < 1e-2)
        {
            continue;
        }
        check_grads(
            &[e],
            &|t, ids| t.triplet_loss(ids[0], &triplets, margin).unwrap(),
            "triplet_loss",
        );
        done += 1;
    }
}

/// Full global network: cross-entropy loss w.r.t. the input image and every
/// trainable parameter, on a tiny 28x14 instance.
pub fn grad_global_network(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for inst in 0..instances {
        let base = GlobalParams::<f64>::init(3, 3, 100 + inst as u64);
        let image = uniform(&[1, 3, 28, 14], 0.0, 1.0, &mut rng);
        let label = [inst % 3];

        let loss_of = |img: &Tensor<f64>, p: &GlobalParams<f64>| -> f64 {
            let mut p = p.clone();
            let mut tape = Tape::new();
            let input = tape.leaf(img.clone(), false);
            let acts = p.forward(&mut tape, input, Mode::Train, false).unwrap();
            let l = tape.cross_entropy(acts.probs, &label).unwrap();
            tape.value(l).item()
        };

        let mut p = base.clone();
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone(), true);
        let acts = p.forward(&mut tape, input, Mode::Train, true).unwrap();
        let loss = tape.cross_entropy(acts.probs, &label).unwrap();
        tape.backward(loss).unwrap();

        let var_of = |slot: usize| match slot {
            0 => acts.vars.conv1_w,
            1 => acts.vars.conv1_b,
            2 => acts.vars.bn1_g,
            3 => acts.vars.bn1_b,
            6 => acts.vars.conv2_w,
            7 => acts.vars.conv2_b,
            8 => acts.vars.bn2_g,
            9 => acts.vars.bn2_b,
            12 => acts.vars.head_w,
            13 => acts.vars.head_b,
            _ => unreachable!(),
        };

        let mut checked = 0usize;
        let mut skipped = 0usize;

        // input gradient, random subset of pixels
        let g_in = tape.grad(input).cloned().unwrap();
        for _ in 0..10 {
            let e = rng.random_range(0..image.numel());
            let orig = image.data()[e];
            let eval = |v: f64| {
                let mut img = image.clone();
                img.data_mut()[e] = v;
                loss_of(&img, &base)
            };
            match fd_checked(eval, orig) {
                None => skipped += 1,
                Some(fd) => {
                    checked += 1;
                    assert!(
                        rel_err(g_in.data()[e], fd) <= TOL,
                        "global net input pixel {e}: analytic {} vs fd {fd}",
                        g_in.data()[e]
                    );
                }
            }
        }

        // parameter gradients, random subset of coordinates per tensor
        for slot in GlobalParams::<f64>::trainable_indices() {
            let v = var_of(slot);
            let g = tape.grad(v).cloned().unwrap();
            let numel = g.numel();
            for _ in 0..numel.min(8) {
                let e = rng.random_range(0..numel);
                let orig = base.named_tensors()[slot].1.data()[e];
                let eval = |v: f64| {
                    let mut p = base.clone();
                    p.named_tensors_mut()[slot].1.data_mut()[e] = v;
                    loss_of(&image, &p)
                };
                match fd_checked(eval, orig) {
                    None => skipped += 1,
                    Some(fd) => {
                        checked += 1;
                        assert!(
                            rel_err(g.data()[e], fd) <= TOL,
                            "global net param slot {slot} elem {e}: analytic {} vs fd {fd}",
                            g.data()[e]
                        );
                    }
                }
            }
        }
        assert!(
            checked >= 4 * skipped.max(1),
            "too many kink-skipped coordinates: {checked} checked vs {skipped} skipped"
        );
    }
}

/// Full local network: weighted-feature loss w.r.t. the input batch and
/// every trainable parameter, on a tiny 8x8 instance.
pub fn grad_local_network(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for inst in 0..instances {
        let base = LocalParams::<f64>::init(&[4, 4, 5], 3, 200 + inst as u64);
        let batch = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let wt = uniform(&[2, 5], -1.0, 1.0, &mut rng);

        let loss_of = |x: &Tensor<f64>, p: &LocalParams<f64>| -> f64 {
            let mut p = p.clone();
            let mut tape = Tape::new();
            let input = tape.leaf(x.clone(), false);
            let (feats, _) = p.forward(&mut tape, input, Mode::Train, false).unwrap();
            let l = weighted(&mut tape, feats, &wt);
            tape.value(l).item()
        };

        let mut p = base.clone();
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), true);
        let (feats, param_vars) = p.forward(&mut tape, input, Mode::Train, true).unwrap();
        let loss = weighted(&mut tape, feats, &wt);
        tape.backward(loss).unwrap();

        let mut checked = 0usize;
        let mut skipped = 0usize;

        let g_in = tape.grad(input).cloned().unwrap();
        for _ in 0..10 {
            let e = rng.random_range(0..batch.numel());
            let orig = batch.data()[e];
            let eval = |v: f64| {
                let mut b = batch.clone();
                b.data_mut()[e] = v;
                loss_of(&b, &base)
            };
            match fd_checked(eval, orig) {
                None => skipped += 1,
                Some(fd) => {
                    checked += 1;
                    assert!(
                        rel_err(g_in.data()[e], fd) <= TOL,
                        "local net input elem {e}: analytic {} vs fd {fd}",
                        g_in.data()[e]
                    );
                }
            }
        }

        // param_vars holds the bound leaves in block order (w, b, gamma,
        // beta per block), matching the trainable slots of named_tensors
        for (vi, slot) in base.trainable_indices().into_iter().enumerate() {
            let g = tape.grad(param_vars[vi]).cloned().unwrap();
            let numel = g.numel();
            for _ in 0..numel.min(8) {
                let e = rng.random_range(0..numel);
                let orig = base.named_tensors()[slot].1.data()[e];
                let eval = |v: f64| {
                    let mut p = base.clone();
                    p.named_tensors_mut()[slot].1.data_mut()[e] = v;
                    loss_of(&batch, &p)
                };
                match fd_checked(eval, orig) {
                    None => skipped += 1,
                    Some(fd) => {
                        checked += 1;
                        assert!(
                            rel_err(g.data()[e], fd) <= TOL,
                            "local net param slot {slot} elem {e}: analytic {} vs fd {fd}",
                            g.data()[e]
                        );
                    }
                }
            }
        }
        assert!(
            checked >= 4 * skipped.max(1),
            "too many kink-skipped coordinates: {checked} checked vs {skipped} skipped"
        );
    }
}

/// The attention map equals the per-component finite difference of the
/// entropy with respect to every feature-grid cell, computed from a single
/// backward pass.
pub fn attention_map_matches_entropy_finite_difference(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for inst in 0..instances as u64 {
        let mut params = GlobalParams::<f64>::init(4, 3, 300 + inst);
        let image = uniform(&[3, 28, 28], 0.0, 1.0, &mut rng);
        let art = gatn::global::analyze(&image, &mut params, 0).unwrap();
        assert_eq!(art.backward_runs, 1, "attention must use exactly one backward pass");

        let (d1, d2) = (art.grid.rows(), art.grid.cols());
        let d = art.grid.channels();
        let grid = art.grid.tensor.clone();

        // entropy as a function of the grid alone (parameters frozen)
        let entropy_of = |g: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let gv = tape.leaf(g.clone().reshaped(&[1, d, d1, d2]).unwrap(), false);
            let vars = {
                // bind the head parameters only
                let hw = tape.leaf(params.head_w.clone(), false);
                let hb = tape.leaf(params.head_b.clone(), false);
                (hw, hb)
            };
            let logit_grid = tape.conv2d(gv, vars.0, vars.1, 1, 0).unwrap();
            let logits = tape.spatial_max(logit_grid).unwrap();
            let probs = tape.softmax(logits).unwrap();
            let h = entropy_on_tape(&mut tape, probs).unwrap();
            tape.value(h).item()
        };

        for i in 0..d1 {
            for j in 0..d2 {
                let mut sq = 0.0;
                for c in 0..d {
                    let e = (c * d1 + i) * d2 + j;
                    let mut plus = grid.clone();
                    plus.data_mut()[e] += STEP;
                    let mut minus = grid.clone();
                    minus.data_mut()[e] -= STEP;
                    let fd = (entropy_of(&plus) - entropy_of(&minus)) / (2.0 * STEP);
                    sq += fd * fd;
                }
                let expected = sq.sqrt();
                let got = art.map.values.data()[i * d2 + j];
                assert!(
                    (got - expected).abs() <= 1e-4,
                    "attention map cell ({i},{j}): map {got} vs finite-difference {expected}"
                );
            }
        }
    }
}
