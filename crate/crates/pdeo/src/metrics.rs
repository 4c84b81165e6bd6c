//! Image quality metrics: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::splat::Image;
use crate::F;

/// Identical images report this sentinel instead of +inf.
pub const PSNR_CAP: F = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1]:
/// `10·log10(1/MSE)`, capped at 99.0.
pub fn psnr(a: &Image, b: &Image) -> Result<F> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Usage("psnr: image dimensions differ".into()));
    }
    let n = (a.pixels.len() * 3) as F;
    let mut mse = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM with the reference constants: 11×11 Gaussian window σ=1.5,
/// k1=0.01, k2=0.03, dynamic range 1. Channels are averaged; windows are
/// evaluated where they fit entirely inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<F> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Usage("ssim: image dimensions differ".into()));
    }
    const WIN: usize = 11;
    const SIGMA: F = 1.5;
    if a.width < WIN || a.height < WIN {
        return Err(Error::Usage("ssim: image smaller than 11x11 window".into()));
    }
    // Normalized separable Gaussian window.
    let mut k = [0.0_f64; WIN];
    let mid = (WIN / 2) as F;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as F - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }

    let c1 = (0.01_f64).powi(2);
    let c2 = (0.03_f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for row in 0..=(a.height - WIN) {
            for col in 0..=(a.width - WIN) {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for i in 0..WIN {
                    for j in 0..WIN {
                        let w = k[i] * k[j];
                        let x = a.at(row + i, col + j)[ch];
                        let y = b.at(row + i, col + j)[ch];
                        mu_x += w * x;
                        mu_y += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as F)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(seed: u64, w: usize, h: usize) -> Image {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for p in img.pixels.iter_mut() {
            *p = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    #[test]
    fn psnr_identical_sentinel() {
        let a = noisy(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    }

    #[test]
    fn psnr_symmetric() {
        let a = noisy(1, 16, 16);
        let b = noisy(2, 16, 16);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_known_value() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.6; 3]);
        // MSE = 0.01 → 20 dB.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_self_is_one() {
        let a = noisy(3, 24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_degrades_with_noise() {
        let a = noisy(4, 24, 24);
        let b = noisy(5, 24, 24);
        assert!(ssim(&a, &b).unwrap() < 0.9);
    }
}
