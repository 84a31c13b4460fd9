//! Dataset ingestion, augmentation, identity-disjoint splitting, and the
//! synthetic benchmark generator.
//!
//! Directory layout follows the `<identity>_<camera>_<index>.<ext>` filename
//! convention; images are decoded from binary PGM/PPM and resized to the
//! configured dimensions (multiples of 14) at ingestion.

pub mod pnm;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const PATCH_SIZE: usize = 14;

#[derive(Debug, Clone)]
pub struct ImageSample<T> {
    /// channels x H x W, values in [0, 1]
    pub pixels: Tensor<T>,
    pub identity: u32,
    pub camera: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct ProtocolConfig {
    /// Target ingestion size; both must be multiples of 14.
    pub height: usize,
    pub width: usize,
    /// Require every identity to appear in at least two cameras.
    pub two_camera: bool,
    /// Exclude same-camera gallery entries when ranking (Market1501 style).
    pub filter_same_camera: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            height: 112,
            width: 56,
            two_camera: true,
            filter_same_camera: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub samples: Vec<ImageSample<T>>,
    /// identity label -> indices into `samples`
    pub identity_index: BTreeMap<u32, Vec<usize>>,
    pub protocol: ProtocolConfig,
}

impl<T: Elem> Dataset<T> {
    pub fn from_samples(samples: Vec<ImageSample<T>>, protocol: ProtocolConfig) -> Self {
        let mut identity_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            identity_index.entry(s.identity).or_default().push(i);
        }
        Dataset {
            samples,
            identity_index,
            protocol,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index.len()
    }

    /// Dense class index (0..C) for an identity label.
    pub fn class_of(&self, identity: u32) -> usize {
        self.identity_index
            .keys()
            .position(|&k| k == identity)
            .expect("identity not in dataset")
    }
}

/// Query/gallery side of an identity-disjoint split.
#[derive(Debug, Clone)]
pub struct TestSplit<T> {
    pub queries: Vec<ImageSample<T>>,
    pub gallery: Vec<ImageSample<T>>,
}

/// Parse `<identity>_<camera>_<index>.<ext>`.
fn parse_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.rsplit_once('.')?.0;
    let mut parts = stem.split('_');
    let id = parts.next()?.parse().ok()?;
    let cam = parts.next()?.parse().ok()?;
    let _idx: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((id, cam))
}

/// Load every PGM/PPM in `dir`, resize to the protocol dimensions, and
/// build the identity index.
pub fn load_dataset<T: Elem>(dir: &Path, protocol: ProtocolConfig) -> Result<Dataset<T>> {
    if protocol.height % PATCH_SIZE != 0 || protocol.width % PATCH_SIZE != 0 {
        return Err(Error::Config(format!(
            "ingestion dimensions {}x{} must be multiples of {PATCH_SIZE}",
            protocol.height, protocol.width
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no PGM/PPM images in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let (identity, camera) = parse_name(name).ok_or_else(|| {
            Error::Dataset(format!(
                "filename {name:?} does not match <identity>_<camera>_<index>.<ext>"
            ))
        })?;
        let decoded: Tensor<T> = pnm::decode_image(&path)?;
        let gray_to_rgb = decoded.shape()[0] == 1;
        let decoded = if gray_to_rgb { replicate_channels(&decoded, 3) } else { decoded };
        let pixels = resize_bilinear(&decoded, protocol.height, protocol.width)?;
        samples.push(ImageSample {
            pixels,
            identity,
            camera,
            path,
        });
    }
    let ds = Dataset::from_samples(samples, protocol);
    if protocol.two_camera {
        for (&id, idxs) in &ds.identity_index {
            let cams: std::collections::BTreeSet<u32> =
                idxs.iter().map(|&i| ds.samples[i].camera).collect();
            if cams.len() < 2 {
                return Err(Error::Dataset(format!(
                    "identity {id} appears in only one camera under the two-camera protocol"
                )));
            }
        }
    }
    Ok(ds)
}

fn replicate_channels<T: Elem>(img: &Tensor<T>, channels: usize) -> Tensor<T> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[channels, h, w], data).unwrap()
}

/// Bilinear resize of a C x H x W tensor.
pub fn resize_bilinear<T: Elem>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected C x H x W, got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h == out_h && w == out_w {
        return Ok(img.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = plane[y0 * w + x0].to_f64() * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * w + x1].to_f64() * (1.0 - wy) * wx
                    + plane[y1 * w + x0].to_f64() * wy * (1.0 - wx)
                    + plane[y1 * w + x1].to_f64() * wy * wx;
                out[(ch * out_h + oy) * out_w + ox] = T::from_f64(v);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

const AUGMENT_PAD: usize = 4;

/// Training-time augmentation: horizontal flip with probability 0.5, then a
/// reflect-padded random crop back to the original size.
pub fn augment<T: Elem>(sample: &ImageSample<T>, rng: &mut impl Rng) -> ImageSample<T> {
    let flip = rng.random_bool(0.5);
    let (c, h, w) = (
        sample.pixels.shape()[0],
        sample.pixels.shape()[1],
        sample.pixels.shape()[2],
    );
    let dy = rng.random_range(0..=2 * AUGMENT_PAD);
    let dx = rng.random_range(0..=2 * AUGMENT_PAD);
    let src = sample.pixels.data();
    let mut out = vec![T::zero(); c * h * w];
    let reflect = |v: isize, n: usize| -> usize {
        let n = n as isize;
        let mut v = v;
        if v < 0 {
            v = -v;
        }
        if v >= n {
            v = 2 * n - 2 - v;
        }
        v as usize
    };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - AUGMENT_PAD as isize, h);
            for x in 0..w {
                let sx0 = if flip { w - 1 - x } else { x };
                let sx = reflect(sx0 as isize + dx as isize - AUGMENT_PAD as isize, w);
                out[(ch * h + y) * w + x] = plane[sy * w + sx];
            }
        }
    }
    ImageSample {
        pixels: Tensor::from_vec(&[c, h, w], out).unwrap(),
        ..sample.clone()
    }
}

/// Identity-disjoint train/test split. Per test identity, one image per
/// camera is selected; the lowest camera id becomes the query, the others
/// go to the gallery.
pub fn split<T: Elem>(
    dataset: &Dataset<T>,
    n_test_ids: usize,
    seed: u64,
) -> Result<(Dataset<T>, TestSplit<T>)> {
    use rand::SeedableRng;
    let total = dataset.num_identities();
    if n_test_ids >= total {
        return Err(Error::Dataset(format!(
            "cannot hold out {n_test_ids} of {total} identities"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = dataset.identity_index.keys().copied().collect();
    ids.shuffle(&mut rng);
    let test_ids: std::collections::BTreeSet<u32> = ids[..n_test_ids].iter().copied().collect();

    let train_samples: Vec<ImageSample<T>> = dataset
        .samples
        .iter()
        .filter(|s| !test_ids.contains(&s.identity))
        .cloned()
        .collect();

    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for &id in &test_ids {
        let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &dataset.identity_index[&id] {
            by_cam.entry(dataset.samples[i].camera).or_default().push(i);
        }
        if by_cam.len() < 2 {
            return Err(Error::Protocol(format!(
                "test identity {id} has images from only one camera"
            )));
        }
        for (rank, (_cam, idxs)) in by_cam.iter().enumerate() {
            let pick = idxs[rng.random_range(0..idxs.len())];
            let sample = dataset.samples[pick].clone();
            if rank == 0 {
                queries.push(sample);
            } else {
                gallery.push(sample);
            }
        }
    }
    Ok((
        Dataset::from_samples(train_samples, dataset.protocol),
        TestSplit { queries, gallery },
    ))
}

/// Assign query/gallery roles across an entire test directory: per
/// identity the first image of the lowest camera becomes the query and
/// every other image joins the gallery. Deterministic.
pub fn make_test_split<T: Elem>(dataset: &Dataset<T>) -> Result<TestSplit<T>> {
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (&id, idxs) in &dataset.identity_index {
        let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in idxs {
            by_cam.entry(dataset.samples[i].camera).or_default().push(i);
        }
        if by_cam.len() < 2 {
            return Err(Error::Protocol(format!(
                "test identity {id} has images from only one camera"
            )));
        }
        let query_idx = by_cam.values().next().unwrap()[0];
        queries.push(dataset.samples[query_idx].clone());
        for &i in idxs {
            if i != query_idx {
                gallery.push(dataset.samples[i].clone());
            }
        }
    }
    Ok(TestSplit { queries, gallery })
}

/// Stack C x H x W images into a B x C x H x W batch.
pub fn stack_images<T: Elem>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::Shape(format!(
                "stack: shape {:?} vs {:?}",
                img.shape(),
                shape
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(id: u32, cam: u32, v: f64) -> ImageSample<f64> {
        ImageSample {
            pixels: Tensor::full(&[3, 28, 14], v),
            identity: id,
            camera: cam,
            path: PathBuf::from(format!("{id}_{cam}_0.ppm")),
        }
    }

    #[test]
    fn filename_parsing() {
        assert_eq!(parse_name("7_0_3.ppm"), Some((7, 0)));
        assert_eq!(parse_name("123_4_0.pgm"), Some((123, 4)));
        assert_eq!(parse_name("bad.ppm"), None);
        assert_eq!(parse_name("1_2_3_4.ppm"), None);
    }

    #[test]
    fn load_dataset_small_directory() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["7_0_0.ppm", "7_1_0.ppm", "9_0_0.ppm", "9_1_0.ppm"] {
            let img = Tensor::<f64>::full(&[3, 4, 4], 0.5);
            pnm::encode_ppm(&img, &dir.path().join(name)).unwrap();
        }
        let ds: Dataset<f64> = load_dataset(dir.path(), ProtocolConfig::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_identities(), 2);
        assert_eq!(ds.samples[0].pixels.shape(), &[3, 112, 56]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset::<f64>(dir.path(), ProtocolConfig::default()).is_err());
    }

    #[test]
    fn single_camera_identity_rejected_under_two_camera_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        pnm::encode_ppm(&img, &dir.path().join("7_0_0.ppm")).unwrap();
        pnm::encode_ppm(&img, &dir.path().join("7_0_1.ppm")).unwrap();
        assert!(load_dataset::<f64>(dir.path(), ProtocolConfig::default()).is_err());
        let relaxed = ProtocolConfig {
            two_camera: false,
            ..Default::default()
        };
        assert!(load_dataset::<f64>(dir.path(), relaxed).is_ok());
    }

    #[test]
    fn split_is_identity_disjoint_and_deterministic() {
        let samples: Vec<_> = (0..10)
            .flat_map(|id| (0..2).map(move |cam| sample(id, cam, 0.1)))
            .collect();
        let ds = Dataset::from_samples(samples, ProtocolConfig::default());
        let (train, test) = split(&ds, 3, 99).unwrap();
        assert_eq!(train.num_identities(), 7);
        assert_eq!(test.queries.len(), 3);
        assert_eq!(test.gallery.len(), 3);
        let train_ids: std::collections::BTreeSet<u32> =
            train.identity_index.keys().copied().collect();
        for q in &test.queries {
            assert!(!train_ids.contains(&q.identity));
        }
        let (train2, test2) = split(&ds, 3, 99).unwrap();
        assert_eq!(train2.num_identities(), train.num_identities());
        let ids1: Vec<u32> = test.queries.iter().map(|q| q.identity).collect();
        let ids2: Vec<u32> = test2.queries.iter().map(|q| q.identity).collect();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn split_rejects_holding_out_everything() {
        let samples: Vec<_> = (0..3)
            .flat_map(|id| (0..2).map(move |cam| sample(id, cam, 0.1)))
            .collect();
        let ds = Dataset::from_samples(samples, ProtocolConfig::default());
        assert!(split(&ds, 3, 0).is_err());
    }

    #[test]
    fn split_test_frequency_is_uniform() {
        let samples: Vec<_> = (0..10)
            .flat_map(|id| (0..2).map(move |cam| sample(id, cam, 0.1)))
            .collect();
        let ds = Dataset::from_samples(samples, ProtocolConfig::default());
        let n_runs = 100;
        let n_test = 3;
        let mut counts = [0usize; 10];
        for seed in 0..n_runs {
            let (_, test) = split(&ds, n_test, seed as u64).unwrap();
            for q in &test.queries {
                counts[q.identity as usize] += 1;
            }
        }
        // each identity in test with p = 3/10; 3 sigma of Binomial(100, 0.3)
        let expect = n_runs as f64 * n_test as f64 / 10.0;
        let sigma = (n_runs as f64 * 0.3 * 0.7).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {c} vs {expect}");
        }
    }

    #[test]
    fn augment_no_op_and_flip_involution() {
        let s = sample(1, 0, 0.0);
        let mut px = s.pixels.clone();
        for (i, v) in px.data_mut().iter_mut().enumerate() {
            *v = i as f64 / 1000.0;
        }
        let s = ImageSample { pixels: px, ..s };

        // rng stream that yields no flip and centered crop is hard to force;
        // instead check flip twice restores the image via the raw kernels
        let flipped = flip_h(&s.pixels);
        let back = flip_h(&flipped);
        assert_eq!(back.data(), s.pixels.data());

        // label and shape are preserved
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = augment(&s, &mut rng);
        assert_eq!(a.identity, s.identity);
        assert_eq!(a.pixels.shape(), s.pixels.shape());
    }

    fn flip_h(t: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = t.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * h + y) * w + x] = t.data()[(ch * h + y) * w + (w - 1 - x)];
                }
            }
        }
        out
    }

    #[test]
    fn augment_flip_frequency_near_half() {
        let s = sample(1, 0, 0.0);
        let mut px = s.pixels.clone();
        for (i, v) in px.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        let s = ImageSample { pixels: px, ..s };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut flips = 0;
        let n = 1000;
        for _ in 0..n {
            let a = augment(&s, &mut rng);
            // detect flip by correlating with the flipped original
            let f = flip_h(&s.pixels);
            let d_orig: f64 = a
                .pixels
                .data()
                .iter()
                .zip(s.pixels.data())
                .map(|(x, y)| (x - y).abs())
                .sum();
            let d_flip: f64 = a
                .pixels
                .data()
                .iter()
                .zip(f.data())
                .map(|(x, y)| (x - y).abs())
                .sum();
            if d_flip < d_orig {
                flips += 1;
            }
        }
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((flips as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Tensor::<f64>::full(&[3, 20, 10], 0.4);
        let out = resize_bilinear(&img, 112, 56).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }
}
