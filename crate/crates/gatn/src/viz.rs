//! Attention-overlay rendering: the max-normalized attention map blended
//! in red over the grayscale image, with selected patches outlined in
//! white at full intensity.

use crate::data::pnm::encode_ppm;
use crate::data::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::global::{AttentionMap, PatchSet};
use crate::tensor::{Elem, Tensor};
use std::path::Path;

const ALPHA: f64 = 0.5;

/// Compose the overlay image (3 x H x W, values in [0, 1]).
///
/// Each pixel blends the grayscale luminance with pure red weighted by the
/// attention of its 14x14 cell: `out = gray * (1 - alpha * m) + red *
/// (alpha * m)` with `m` the map normalized by its maximum. A zero map
/// reproduces the grayscale image exactly.
pub fn compose_overlay<T: Elem>(
    image: &Tensor<T>,
    map: &AttentionMap<T>,
    patches: &PatchSet<T>,
) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected C x H x W image, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("{c} channels; expected grayscale or RGB")));
    }
    let (d1, d2) = (map.rows(), map.cols());
    if d1 * PATCH_SIZE != h || d2 * PATCH_SIZE != w {
        return Err(Error::Shape(format!(
            "attention map {d1}x{d2} does not tile a {h}x{w} image"
        )));
    }
    let max = map
        .values
        .data()
        .iter()
        .fold(T::zero(), |m, &v| if v > m { v } else { m });
    let alpha = T::from_f64(ALPHA);
    let third = T::from_f64(1.0 / 3.0);

    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let gray = if c == 1 {
                image.data()[y * w + x]
            } else {
                (0..3).map(|ch| image.data()[(ch * h + y) * w + x]).sum::<T>() * third
            };
            let cell = (y / PATCH_SIZE) * d2 + x / PATCH_SIZE;
            let m = if max > T::zero() {
                map.values.data()[cell] / max
            } else {
                T::zero()
            };
            let weight = alpha * m;
            let r = gray * (T::one() - weight) + weight;
            let gb = gray * (T::one() - weight);
            out.data_mut()[y * w + x] = r;
            out.data_mut()[(h + y) * w + x] = gb;
            out.data_mut()[(2 * h + y) * w + x] = gb;
        }
    }
    for p in 0..patches.len() {
        let (y0, x0, ph, pw) = patches.rect(p);
        for x in x0..x0 + pw {
            for &y in &[y0, y0 + ph - 1] {
                for ch in 0..3 {
                    out.data_mut()[(ch * h + y) * w + x] = T::one();
                }
            }
        }
        for y in y0..y0 + ph {
            for &x in &[x0, x0 + pw - 1] {
                for ch in 0..3 {
                    out.data_mut()[(ch * h + y) * w + x] = T::one();
                }
            }
        }
    }
    Ok(out)
}

pub fn render_attention_overlay<T: Elem>(
    image: &Tensor<T>,
    map: &AttentionMap<T>,
    patches: &PatchSet<T>,
    out_path: &Path,
) -> Result<()> {
    let overlay = compose_overlay(image, map, patches)?;
    encode_ppm(&overlay, out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(d1: usize, d2: usize, v: f64) -> AttentionMap<f64> {
        AttentionMap {
            values: Tensor::full(&[d1, d2], v),
        }
    }

    #[test]
    fn zero_map_and_no_patches_give_the_grayscale_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Tensor::<f64>::randn(&[3, 28, 28], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let map = uniform_map(2, 2, 0.0);
        let out = compose_overlay(&image, &map, &PatchSet::empty()).unwrap();
        for y in 0..28 {
            for x in 0..28 {
                let gray = (image.data()[y * 28 + x]
                    + image.data()[(28 + y) * 28 + x]
                    + image.data()[(2 * 28 + y) * 28 + x])
                    / 3.0;
                for ch in 0..3 {
                    assert!((out.data()[(ch * 28 + y) * 28 + x] - gray).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blend_formula_on_sampled_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::<f64>::randn(&[1, 28, 28], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let map = AttentionMap {
            values: Tensor::from_vec(&[2, 2], vec![0.5, 1.0, 0.25, 0.0]).unwrap(),
        };
        let out = compose_overlay(&image, &map, &PatchSet::empty()).unwrap();
        for _ in 0..10 {
            let (y, x) = (rng.random_range(0..28), rng.random_range(0..28));
            let gray = image.data()[y * 28 + x];
            let m = map.values.data()[(y / 14) * 2 + x / 14]; // max is 1.0
            let red = gray * (1.0 - 0.5 * m) + 0.5 * m;
            let green = gray * (1.0 - 0.5 * m);
            assert!((out.data()[y * 28 + x] - red).abs() < 1e-12);
            assert!((out.data()[(28 + y) * 28 + x] - green).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_outlines_are_full_intensity() {
        let image = Tensor::<f64>::full(&[3, 28, 28], 0.3);
        let map = uniform_map(2, 2, 0.0);
        let patches = PatchSet {
            positions: vec![(1, 0)],
            patches: vec![Tensor::zeros(&[3, 14, 14])],
        };
        let out = compose_overlay(&image, &map, &patches).unwrap();
        // the (1, 0) cell spans rows 14..28, cols 0..14
        for ch in 0..3 {
            for x in 0..14 {
                assert_eq!(out.data()[(ch * 28 + 14) * 28 + x], 1.0);
                assert_eq!(out.data()[(ch * 28 + 27) * 28 + x], 1.0);
            }
            for y in 14..28 {
                assert_eq!(out.data()[(ch * 28 + y) * 28], 1.0);
                assert_eq!(out.data()[(ch * 28 + y) * 28 + 13], 1.0);
            }
        }
        // interior stays blended
        assert!((out.data()[20 * 28 + 5] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mismatched_map_rejected() {
        let image = Tensor::<f64>::zeros(&[3, 28, 28]);
        let map = uniform_map(3, 2, 0.0);
        assert!(compose_overlay(&image, &map, &PatchSet::empty()).is_err());
    }

    #[test]
    fn writes_a_decodable_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.ppm");
        let image = Tensor::<f64>::full(&[3, 28, 28], 0.5);
        let map = uniform_map(2, 2, 1.0);
        render_attention_overlay(&image, &map, &PatchSet::empty(), &path).unwrap();
        let back: Tensor<f64> = crate::data::pnm::decode_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 28, 28]);
    }
}
