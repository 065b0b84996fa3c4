#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// 64-bit LCG images shared with `fixtures/metrics_reference.py`.
pub fn lcg_image(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub struct ReferencePair {
    pub shape: [usize; 3],
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

/// The 20 frozen scikit-image comparisons.
pub fn reference_pairs() -> Vec<ReferencePair> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics_reference.csv");
    let text = std::fs::read_to_string(path).expect("fixture present");
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let pair: u64 = f[0].parse().unwrap();
            let shape = [f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap()];
            let n: usize = shape.iter().product();
            let level = 0.05 * (pair + 1) as f64;
            let x = lcg_image(n, 1000 + pair);
            let noise = lcg_image(n, 5000 + pair);
            let y = x
                .iter()
                .zip(&noise)
                .map(|(a, e)| (a + level * (2.0 * e - 1.0)).clamp(0.0, 1.0))
                .collect();
            ReferencePair {
                shape,
                x,
                y,
                ssim: f[5].parse().unwrap(),
                psnr: f[6].parse().unwrap(),
                mse: f[7].parse().unwrap(),
            }
        })
        .collect()
}

/// MNIST directory: `GRADLEAK_DATA`, else the workspace `data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("GRADLEAK_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
