//! Reconstruction quality: MSE, PSNR, and SSIM on images in [0, 1].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM Gaussian window.
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("metric", format!("{} vs {} values", x.len(), y.len())));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(1 / mse)` for unit data range; `+inf` for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    mse(x, y).map(psnr_from_mse)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * img[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(x, x), h, w, &k);
    let myy = filter_valid(&prod(y, y), h, w, &k);
    let mxy = filter_valid(&prod(x, y), h, w, &k);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    total / n as f64
}

/// Mean local SSIM of two `(channels, height, width)` images, averaged over channels.
///
/// Gaussian 11x11 window with sigma 1.5, population statistics, `C1 = 0.01^2`,
/// `C2 = 0.03^2`, unit data range; only window positions fully inside the image
/// are scored.
pub fn ssim(x: &[f64], y: &[f64], shape: [usize; 3]) -> Result<f64> {
    check_pair(x, y)?;
    let [c, h, w] = shape;
    if c * h * w != x.len() {
        return Err(Error::shape("ssim", format!("{} values for shape {:?}", x.len(), shape)));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(&x[ch * plane..(ch + 1) * plane], &y[ch * plane..(ch + 1) * plane], h, w))
        .sum();
    Ok(total / c as f64)
}

/// Scores of one reconstructed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub mmd: Option<f64>,
    pub trd: Option<f64>,
}

impl SampleMetrics {
    /// Image scores of `reconstruction` against `original`, both in [0, 1].
    pub fn compare(sample_id: usize, original: &[f64], reconstruction: &[f64], shape: [usize; 3]) -> Result<Self> {
        let m = mse(original, reconstruction)?;
        Ok(Self {
            sample_id,
            ssim: ssim(original, reconstruction, shape)?,
            psnr: psnr_from_mse(m),
            mse: m,
            mmd: None,
            trd: None,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn column(&self, f: impl Fn(&SampleMetrics) -> Option<f64>) -> Option<Summary> {
        let v: Vec<f64> = self.samples.iter().filter_map(f).collect();
        Summary::of(&v)
    }

    pub fn ssim(&self) -> Option<Summary> {
        self.column(|s| Some(s.ssim))
    }

    /// Infinite per-sample PSNRs (exact reconstructions) make the mean infinite.
    pub fn psnr(&self) -> Option<Summary> {
        self.column(|s| Some(s.psnr))
    }

    pub fn mse(&self) -> Option<Summary> {
        self.column(|s| Some(s.mse))
    }

    pub fn mmd(&self) -> Option<Summary> {
        self.column(|s| s.mmd)
    }

    pub fn trd(&self) -> Option<Summary> {
        self.column(|s| s.trd)
    }

    /// `sample_id,ssim,psnr,mse,mmd,trd`; mask columns are empty when not applicable.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = String::from("sample_id,ssim,psnr,mse,mmd,trd\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.sample_id,
                s.ssim,
                s.psnr,
                s.mse,
                opt(s.mmd),
                opt(s.trd)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Direct 2D-window SSIM, no separability.
    fn ssim_bruteforce(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let r = 5i64;
        let mut k2 = vec![0.0; 121];
        for dy in -r..=r {
            for dx in -r..=r {
                k2[((dy + r) * 11 + dx + r) as usize] = (-((dy * dy + dx * dx) as f64) / (2.0 * 2.25)).exp();
            }
        }
        let s: f64 = k2.iter().sum();
        k2.iter_mut().for_each(|v| *v /= s);
        let mut total = 0.0;
        let mut count = 0.0;
        for cy in 5..h - 5 {
            for cx in 5..w - 5 {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let i = (cy + dy - 5) * w + cx + dx - 5;
                        let kw = k2[dy * 11 + dx];
                        ux += kw * x[i];
                        uy += kw * y[i];
                        xx += kw * x[i] * x[i];
                        yy += kw * y[i] * y[i];
                        xy += kw * x[i] * y[i];
                    }
                }
                let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
                count += 1.0;
            }
        }
        total / count
    }

    fn pseudo_image(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0; 9], &[1.0; 9]).unwrap(), 1.0);
        assert!((mse(&[0.0, 0.0], &[0.1, 0.3]).unwrap() - 0.05).abs() < 1e-15);
        assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.5; 4], &[0.5; 4]).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
    }

    #[test]
    fn ssim_examples() {
        let x = pseudo_image(400, 3);
        assert!((ssim(&x, &x, [1, 20, 20]).unwrap() - 1.0).abs() < 1e-12);
        let zeros = vec![0.0; 144];
        let ones = vec![1.0; 144];
        let expected = C1 / (1.0 + C1);
        assert!((ssim(&zeros, &ones, [1, 12, 12]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 9.999e-5).abs() < 1e-8);
        assert!(ssim(&[0.0; 100], &[0.0; 100], [1, 10, 10]).is_err());
    }

    #[test]
    fn ssim_matches_direct_windows() {
        for seed in 0..4 {
            let x = pseudo_image(15 * 17, seed);
            let noise = pseudo_image(15 * 17, seed + 100);
            let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| (a + 0.3 * (n - 0.5)).clamp(0.0, 1.0)).collect();
            let fast = ssim(&x, &y, [1, 15, 17]).unwrap();
            let slow = ssim_bruteforce(&x, &y, 15, 17);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn csv_column_order() {
        let r = MetricReport::new(vec![
            SampleMetrics {
                sample_id: 0,
                ssim: 0.5,
                psnr: f64::INFINITY,
                mse: 0.0,
                mmd: Some(0.25),
                trd: Some(0.0),
            },
            SampleMetrics {
                sample_id: 1,
                ssim: 1.0,
                psnr: 20.0,
                mse: 0.01,
                mmd: None,
                trd: None,
            },
        ]);
        assert_eq!(r.to_csv(), "sample_id,ssim,psnr,mse,mmd,trd\n0,0.5,inf,0,0.25,0\n1,1,20,0.01,,\n");
        assert_eq!(r.ssim().unwrap().mean, 0.75);
        assert_eq!(r.mmd().unwrap().mean, 0.25);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ssim_is_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000) {
            let x = pseudo_image(144, a);
            let y = pseudo_image(144, b + 5000);
            let s1 = ssim(&x, &y, [1, 12, 12]).unwrap();
            let s2 = ssim(&y, &x, [1, 12, 12]).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-14);
            prop_assert!(s1.abs() <= 1.0);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-8f64..10.0, m2 in 1e-8f64..10.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }
    }
}
