mod common;

use gradleak::metrics::{mse, psnr, ssim};

#[test]
fn agrees_with_scikit_image() {
    let pairs = common::reference_pairs();
    assert_eq!(pairs.len(), 20);
    for (i, p) in pairs.iter().enumerate() {
        let s = ssim(&p.x, &p.y, p.shape).unwrap();
        let m = mse(&p.x, &p.y).unwrap();
        let q = psnr(&p.x, &p.y).unwrap();
        assert!((s - p.ssim).abs() < 1e-6, "pair {i}: ssim {s} vs {}", p.ssim);
        assert!((m - p.mse).abs() < 1e-6, "pair {i}: mse {m} vs {}", p.mse);
        assert!((q - p.psnr).abs() < 1e-6, "pair {i}: psnr {q} vs {}", p.psnr);
    }
}
