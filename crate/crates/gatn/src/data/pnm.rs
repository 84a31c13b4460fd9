//! Minimal binary PGM (P5) / PPM (P6) codec.
//!
//! Decoding yields a channels x height x width tensor with values scaled to
//! [0, 1]. Other formats are rejected with a conversion hint; 8-bit encode
//! followed by decode is lossless.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Decode a P5 or P6 file into a C x H x W tensor in [0, 1].
pub fn decode_image<T: Elem>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes).map_err(|e| match e {
        Error::ImageFormat(msg) => Error::ImageFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_bytes<T: Elem>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)
        .ok_or_else(|| Error::ImageFormat("missing magic number".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::ImageFormat(
                "only binary PGM (P5) and PPM (P6) are supported; convert other formats first, e.g. `convert in.jpg out.ppm`".into(),
            ))
        }
    };
    let width = int_token(bytes, &mut pos)?;
    let height = int_token(bytes, &mut pos)?;
    let maxval = int_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates header from payload
    if pos >= bytes.len() {
        return Err(Error::ImageFormat("truncated header".into()));
    }
    pos += 1;
    let n = width * height * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::ImageFormat("truncated pixel payload".into()))?;
    let maxval = maxval as f64;
    // interleaved rows -> planar channels
    let mut data = vec![T::zero(); n];
    for (i, &b) in payload.iter().enumerate() {
        let c = i % channels;
        let pix = i / channels;
        data[c * width * height + pix] = T::from_f64(b as f64 / maxval);
    }
    Tensor::from_vec(&[channels, height, width], data)
}

/// Encode a 1 x H x W tensor in [0, 1] as binary PGM with maxval 255.
pub fn encode_pgm<T: Elem>(image: &Tensor<T>, path: &Path) -> Result<()> {
    write_pnm(image, path, 1, b"P5")
}

/// Encode a 3 x H x W tensor in [0, 1] as binary PPM with maxval 255.
pub fn encode_ppm<T: Elem>(image: &Tensor<T>, path: &Path) -> Result<()> {
    write_pnm(image, path, 3, b"P6")
}

fn write_pnm<T: Elem>(image: &Tensor<T>, path: &Path, channels: usize, magic: &[u8]) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != channels {
        return Err(Error::Shape(format!(
            "expected {channels} x H x W tensor, got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w * channels + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{w} {h}\n255\n").as_bytes());
    for pix in 0..h * w {
        for c in 0..channels {
            let v = image.data()[c * h * w + pix].to_f64();
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Next whitespace-delimited token, skipping `#` comment lines.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

fn int_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = token(bytes, pos).ok_or_else(|| Error::ImageFormat("truncated header".into()))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat("bad header field".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_2x2_p5() {
        let bytes = b"P5\n2 2\n255\n\x00\x55\xaa\xff";
        let t: Tensor<f64> = decode_bytes(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let expect = [0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0];
        for (a, b) in t.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn p6_nonstandard_maxval_scaling() {
        let bytes = b"P6\n1 1\n100\n\x32\x00\x64";
        let t: Tensor<f64> = decode_bytes(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert!((t.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip_is_byte_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * 5 * 4)
            .map(|_| rng.random_range(0..=255u8) as f64 / 255.0)
            .collect();
        let img = Tensor::from_vec(&[3, 5, 4], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        encode_ppm(&img, &path).unwrap();
        let back: Tensor<f64> = decode_image(&path).unwrap();
        assert_eq!(img.data(), back.data());
        encode_ppm(&back, &dir.path().join("y.ppm")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("y.ppm")).unwrap()
        );
    }

    #[test]
    fn corrupt_and_truncated_inputs_are_rejected() {
        assert!(decode_bytes::<f64>(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_bytes::<f64>(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_bytes::<f64>(b"P5\n2\n").is_err());
    }
}
