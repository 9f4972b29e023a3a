//! Image quality metrics: windowed SSIM, MSE on the 0-255 scale, and mask
//! IoU.

use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Luma conversion used before SSIM: 0.299 R + 0.587 G + 0.114 B.
pub fn to_gray(image: &[f64], channels: usize, pixels: usize) -> Result<Vec<f64>> {
    match channels {
        1 => Ok(image.to_vec()),
        3 => {
            let mut out = Vec::with_capacity(pixels);
            for i in 0..pixels {
                out.push(
                    0.299 * image[i] + 0.587 * image[pixels + i] + 0.114 * image[2 * pixels + i],
                );
            }
            Ok(out)
        }
        c => Err(Error::Dimension(format!(
            "gray conversion needs 1 or 3 channels, got {}",
            c
        ))),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity between two images in [0, 1] (any channel count
/// handled by luma conversion first): 11x11 Gaussian window, sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2, averaged over all fully-interior windows.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != channels * height * width {
        return Err(Error::Dimension(format!(
            "ssim buffers {} and {} vs {}x{}x{}",
            a.len(),
            b.len(),
            channels,
            height,
            width
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "image {}x{} smaller than the {0}x{0} SSIM window",
            height, width
        )));
    }
    let ga = to_gray(a, channels, height * width)?;
    let gb = to_gray(b, channels, height * width)?;
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=(height - SSIM_WINDOW) {
        for wx in 0..=(width - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let w = win[ky * SSIM_WINDOW + kx];
                    let va = ga[(wy + ky) * width + wx + kx];
                    let vb = gb[(wy + ky) * width + wx + kx];
                    mu_a += w * va;
                    mu_b += w * vb;
                    aa += w * va * va;
                    bb += w * vb * vb;
                    ab += w * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared error over pixels and channels, reported on the 0-255
/// scale (multiplied by 255^2).
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "mse buffers differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dimension("mse of empty buffers".into()));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64 * 255.0 * 255.0)
}

/// Intersection over union of two binary masks; 1.0 when both are empty.
pub fn iou(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "iou masks differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (bx, by) = (x >= 0.5, y >= 0.5);
        if bx && by {
            inter += 1;
        }
        if bx || by {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = ssim(&img, &img, 3, 16, 16).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // mu_a = 0, mu_b = 1, zero variances: C1 / (1 + C1)
        let a = vec![0.0; 12 * 12];
        let b = vec![1.0; 12 * 12];
        let v = ssim(&a, &b, 1, 12, 12).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((v - expect).abs() < 1e-8, "{} vs {}", v, expect);
        assert!((expect - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..14 * 14).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..14 * 14).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ab = ssim(&a, &b, 1, 14, 14).unwrap();
        let ba = ssim(&b, &a, 1, 14, 14).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_per_window_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (13usize, 15usize);
        let a: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();

        // independent direct evaluation: explicit weighted moments per window
        let c = 5.0f64; // window center
        let mut weights = vec![0.0; 121];
        let mut wsum = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let v =
                    (-((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
                weights[y * 11 + x] = v;
                wsum += v;
            }
        }
        let mut expect = 0.0;
        let mut n = 0;
        for wy in 0..=(h - 11) {
            for wx in 0..=(w - 11) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        let wgt = weights[y * 11 + x] / wsum;
                        ma += wgt * a[(wy + y) * w + wx + x];
                        mb += wgt * b[(wy + y) * w + wx + x];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        let wgt = weights[y * 11 + x] / wsum;
                        let da = a[(wy + y) * w + wx + x] - ma;
                        let db = b[(wy + y) * w + wx + x] - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                expect += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                    / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                n += 1;
            }
        }
        expect /= n as f64;
        let got = ssim(&a, &b, 1, h, w).unwrap();
        assert!((got - expect).abs() < 1e-9, "{} vs {}", got, expect);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = vec![0.0; 100];
        assert!(ssim(&a, &a, 1, 10, 10).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = vec![0.0; 8];
        let b = vec![1.0; 8];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 65025.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut expect = 0.0;
            for i in 0..24 {
                expect += (x[i] - y[i]) * (x[i] - y[i]);
            }
            expect = expect / 24.0 * 65025.0;
            assert!((mse(&x, &y).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_cases() {
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&[], &[]).unwrap(), 1.0);
        // 4 vs 4 with overlap 2: 2 / 6, consistent with the silhouette loss
        let x = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let y = vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!((iou(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // random pairs against a loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let mut inter = 0.0;
            let mut uni = 0.0;
            for i in 0..32 {
                if x[i] == 1.0 && y[i] == 1.0 {
                    inter += 1.0;
                }
                if x[i] == 1.0 || y[i] == 1.0 {
                    uni += 1.0;
                }
            }
            let expect = if uni == 0.0 { 1.0 } else { inter / uni };
            assert_eq!(iou(&x, &y).unwrap(), expect);
        }
    }
}
