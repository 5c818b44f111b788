//! Image quality metrics on 8-bit RGB images.

use crate::error::{Error, Result};
use crate::image::Image;

/// Standard five-scale MS-SSIM exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Image(format!(
            "dimension mismatch: {}×{} vs {}×{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error over all samples, in 8-bit units.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(255²/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// A single channel plane in row-major order.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Self {
        Self {
            w: img.width(),
            h: img.height(),
            v: img.data().iter().skip(c).step_by(3).map(|&x| x as f64).collect(),
        }
    }

    /// 2×2 average pooling (odd trailing row/column dropped).
    fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)));
            }
        }
        Self { w, h, v }
    }

    /// Valid-mode separable filtering with a symmetric 1-D kernel.
    fn filter(&self, k: &[f64]) -> Self {
        let n = k.len();
        let (w, h) = (self.w + 1 - n, self.h + 1 - n);
        let mut rows = vec![0.0; w * self.h];
        for y in 0..self.h {
            for x in 0..w {
                rows[y * w + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (0..n).map(|i| k[i] * rows[(y + i) * w + x]).sum();
            }
        }
        Self { w, h, v }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let k: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term of two planes.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let aa = a.zip(a, |x, y| x * y).filter(k);
    let bb = b.zip(b, |x, y| x * y).filter(k);
    let ab = a.zip(b, |x, y| x * y).filter(k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// Single-scale SSIM averaged over the RGB channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    if a.width() < WINDOW || a.height() < WINDOW {
        return Err(Error::Image(format!("SSIM needs at least {WINDOW}×{WINDOW} pixels")));
    }
    let k = gaussian_kernel();
    Ok((0..3)
        .map(|c| ssim_terms(&Plane::channel(a, c), &Plane::channel(b, c), &k).0)
        .sum::<f64>()
        / 3.0)
}

/// Number of MS-SSIM scales an image of this size supports (at most 5).
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut m = width.min(height);
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && m >= WINDOW {
        scales += 1;
        m /= 2;
    }
    scales
}

/// Multi-scale SSIM averaged over the RGB channels. Images smaller than
/// 176×176 use fewer scales, with the remaining weights renormalized.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let scales = ms_ssim_scales(a.width(), a.height());
    if scales == 0 {
        return Err(Error::Image(format!(
            "MS-SSIM needs at least {WINDOW}×{WINDOW} pixels, got {}×{}",
            a.width(),
            a.height()
        )));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        log::warn!("MS-SSIM on {}×{}: using {scales} of 5 scales", a.width(), a.height());
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / total).collect();
    let k = gaussian_kernel();
    let mut score = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb) = (Plane::channel(a, c), Plane::channel(b, c));
        let mut product = 1.0;
        for (j, &w) in weights.iter().enumerate() {
            let (ss, cs) = ssim_terms(&pa, &pb, &k);
            // Negative terms would make fractional powers undefined.
            let term = if j + 1 == scales { ss } else { cs };
            product *= term.max(0.0).powf(w);
            if j + 1 < scales {
                pa = pa.downsample();
                pb = pb.downsample();
            }
        }
        score += product;
    }
    Ok((score / 3.0).clamp(0.0, 1.0))
}
