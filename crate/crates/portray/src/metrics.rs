//! Image and sequence quality metrics: PSNR, global SSIM, 1-D SSIM, MAE.

/// Identical inputs are reported as this finite cap instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio for signals in [0, 1], capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Global (single-window) SSIM over signals in [0, 1].
pub fn ssim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
        cov += (x - mean_a) * (y - mean_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mean_a * mean_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mean_a * mean_a + mean_b * mean_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    num / den
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Luma (Rec. 601) of a planar RGB `[3, h, w]` buffer.
pub fn luma(planar_rgb: &[f64]) -> Vec<f64> {
    let hw = planar_rgb.len() / 3;
    (0..hw)
        .map(|i| {
            0.299 * planar_rgb[i] + 0.587 * planar_rgb[hw + i] + 0.114 * planar_rgb[2 * hw + i]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identical_inputs_cap() {
        let a = vec![0.25; 100];
        assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(mae(&a, &a), 0.0);
    }

    #[test]
    fn constant_shift_mae() {
        let a = vec![0.3; 64];
        let b = vec![0.4; 64];
        assert!((mae(&a, &b) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn matches_textbook_formula_oracles() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();

        // PSNR oracle: direct double loop
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a[i] - b[i]).powi(2);
        }
        mse /= a.len() as f64;
        let psnr_oracle = 10.0 * (1.0f64 / mse).log10();
        assert!((psnr(&a, &b) - psnr_oracle).abs() < 1e-6);

        // SSIM oracle: textbook statistics computed independently
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
        let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / n;
        let cab = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let c1 = 0.0001;
        let c2 = 0.0009;
        let ssim_oracle =
            ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        assert!((ssim(&a, &b) - ssim_oracle).abs() < 1e-6);
    }
}
