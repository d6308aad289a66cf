//! Small synthetic greyscale images and their on-disk forms.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Matrix;
use crate::error::Result;

/// Smooth images in [0, 1]: a random linear ramp plus two or three Gaussian
/// blobs, min-max normalized.
pub fn fixture_images(count: usize, side: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (gx, gy): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=3))
                .map(|_| {
                    (
                        rng.random_range(0.0..side as f64),
                        rng.random_range(0.0..side as f64),
                        rng.random_range(side as f64 * 0.12..side as f64 * 0.3),
                        rng.random_range(-1.0..1.5),
                    )
                })
                .collect();
            let mut img = Matrix::zeros(side, side);
            for r in 0..side {
                for c in 0..side {
                    let (y, x) = (r as f64 / side as f64, c as f64 / side as f64);
                    let mut v = 0.5 * (gx * x + gy * y);
                    for (cy, cx, s, a) in &blobs {
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                    img.set(r, c, v);
                }
            }
            let lo = img.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            img.as_mut_slice().iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
            img
        })
        .collect()
}

pub fn mean_image(images: &[Matrix]) -> Vec<f64> {
    let n = images[0].as_slice().len();
    let mut acc = vec![0.0; n];
    for img in images {
        acc.iter_mut().zip(img.as_slice()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= images.len() as f64);
    acc
}

/// Binary 8-bit PGM; values are clamped to [0, 1].
pub fn write_pgm(path: &Path, image: &Matrix) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.cols(), image.rows())?;
    let bytes: Vec<u8> = image.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Raw little-endian f64 dump, row-major.
pub fn write_raw(path: &Path, image: &Matrix) -> Result<()> {
    let bytes: Vec<u8> = image.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Matrix::from_vec(rows, cols, values)
}
