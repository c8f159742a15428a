//! Dataset sources and image files.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::PrivateBatch;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Smooth random images: a flat background plus a few Gaussian blobs.
///
/// Labels are distinct when `batch <= classes`.
pub fn synthetic_batch(seed: u64, batch: usize, channels: usize, side: usize, classes: usize) -> Result<PrivateBatch> {
    if batch == 0 || channels == 0 || side == 0 || classes == 0 {
        return Err(Error::invalid("synthetic batch dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut data = Vec::with_capacity(batch * channels * plane);
    for _ in 0..batch {
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..rng.random_range(3..=5))
            .map(|_| {
                let cy = rng.random_range(0.0..side as f64);
                let cx = rng.random_range(0.0..side as f64);
                let s = rng.random_range(0.12..0.3) * side as f64;
                let amp = (0..channels)
                    .map(|_| rng.random_range(0.3..0.7) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect();
                (cy, cx, s, amp)
            })
            .collect();
        for c in 0..channels {
            let bg = rng.random_range(0.3..0.7);
            for y in 0..side {
                for x in 0..side {
                    let mut v = bg;
                    for (cy, cx, s, amp) in &blobs {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        v += amp[c] * (-d2 / (2.0 * s * s)).exp();
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let labels = if batch <= classes {
        let mut l = sample(&mut rng, classes, batch).into_vec();
        l.sort_unstable();
        l
    } else {
        (0..batch).map(|_| rng.random_range(0..classes)).collect()
    };
    PrivateBatch::new(Tensor::new(&[batch, channels, side, side], data)?, labels)
}

/// Reads the given records of a CIFAR-10 binary batch file.
pub fn load_cifar10(path: &Path, indices: &[usize]) -> Result<PrivateBatch> {
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes, indices)
}

pub fn parse_cifar10(bytes: &[u8], indices: &[usize]) -> Result<PrivateBatch> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "cifar10",
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(indices.len() * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= n {
            return Err(Error::invalid(format!("record {i} out of range for {n} records")));
        }
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format("cifar10", format!("record {i} has label {label}")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    PrivateBatch::new(Tensor::new(&[indices.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels)
}

/// Encodes records in the CIFAR-10 binary layout.
pub fn encode_cifar10(records: &[(u8, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (label, pixels) in records {
        if pixels.len() != CIFAR_RECORD - 1 {
            return Err(Error::invalid("cifar10 record needs 3072 pixel bytes"));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    Ok(out)
}

/// Quantizes to bytes with half-up rounding; returns the bytes and the number
/// of values clamped into `[0, 1]`.
pub fn quantize(values: &[f64]) -> (Vec<u8>, usize) {
    let mut clamped = 0;
    let bytes = values
        .iter()
        .map(|&v| {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c != v {
                clamped += 1;
            }
            (c * 255.0 + 0.5).floor() as u8
        })
        .collect();
    (bytes, clamped)
}

/// Binary PGM for one channel, PPM for three. Returns the clamp count.
pub fn encode_image(image: &Tensor) -> Result<(Vec<u8>, usize)> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::invalid(format!("image must be 1xHxW or 3xHxW, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    // Planar to interleaved.
    let interleaved: Vec<f64> = (0..plane)
        .flat_map(|p| (0..c).map(move |ch| (ch, p)))
        .map(|(ch, p)| image.data()[ch * plane + p])
        .collect();
    let (bytes, clamped) = quantize(&interleaved);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    Ok((out, clamped))
}

pub fn write_image(image: &Tensor, path: &Path) -> Result<usize> {
    let (bytes, clamped) = encode_image(image)?;
    fs::write(path, bytes)?;
    Ok(clamped)
}

/// Parses binary PGM/PPM with maxval 255 into a `C×H×W` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let bad = |r: &str| Error::format("pnm", r.to_string());
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    let c = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad number '{t}'")));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let plane = w * h;
    let payload = bytes.get(pos..pos + plane * c).ok_or_else(|| bad("truncated payload"))?;
    let mut data = vec![0.0; plane * c];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = payload[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Loads all `.pgm`/`.ppm` files of a directory in name order; the label is
/// the leading integer of the file name (`3_cat.ppm` has label 3).
pub fn load_image_dir(dir: &Path, indices: &[usize]) -> Result<PrivateBatch> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for &i in indices {
        let path = files
            .get(i)
            .ok_or_else(|| Error::invalid(format!("image {i} out of range for {} files", files.len())))?;
        let img = decode_image(&fs::read(path)?)?;
        match &shape {
            Some(s) if s != img.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "load_image_dir",
                    lhs: s.clone(),
                    rhs: img.shape().to_vec(),
                })
            }
            _ => shape = Some(img.shape().to_vec()),
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let digits: String = name.chars().take_while(char::is_ascii_digit).collect();
        labels.push(
            digits
                .parse()
                .map_err(|_| Error::format("image dir", format!("no leading label in '{name}'")))?,
        );
        data.extend_from_slice(img.data());
    }
    let s = shape.ok_or_else(|| Error::invalid("no images selected"))?;
    PrivateBatch::new(Tensor::new(&[indices.len(), s[0], s[1], s[2]], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_batch(4, 4, 1, 16, 10).unwrap();
        let b = synthetic_batch(4, 4, 1, 16, 10).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let mut l = a.labels.clone();
        l.dedup();
        assert_eq!(l.len(), 4);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cifar_two_records() {
        let recs: Vec<(u8, Vec<u8>)> = vec![(7, vec![255; 3072]), (2, (0..3072).map(|i| (i % 256) as u8).collect())];
        let bytes = encode_cifar10(&recs).unwrap();
        let b = parse_cifar10(&bytes, &[0, 1]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.labels, vec![7, 2]);
        assert_eq!(b.images.data()[0], 1.0);
        assert!(parse_cifar10(&bytes, &[2]).is_err());
        assert!(parse_cifar10(&bytes[..bytes.len() - 1], &[0]).is_err());
    }

    #[test]
    fn white_pixel_and_half() {
        let (bytes, _) = encode_image(&Tensor::ones(&[3, 1, 1])).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 255, 255]);
        assert_eq!(quantize(&[0.5]).0, vec![128]);
        assert_eq!(quantize(&[-0.1, 1.2, 0.3]).1, 2);
    }

    #[test]
    fn image_roundtrip() {
        let img = synthetic_batch(1, 1, 3, 5, 10).unwrap().images;
        let img = Tensor::new(&[3, 5, 5], img.to_vec()).unwrap();
        let (bytes, clamped) = encode_image(&img).unwrap();
        assert_eq!(clamped, 0);
        let back = decode_image(&bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
