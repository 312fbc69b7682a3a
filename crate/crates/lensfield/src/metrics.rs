//! Image quality metrics.
//!
//! Scores are computed on sRGB-encoded, 8-bit-quantized images scaled to
//! [0, 1]: that is how reconstructions are conventionally reported, and it
//! pins the protocol so numbers are comparable across runs. PSNR is capped
//! at 99 dB for exact matches. SSIM uses the standard 11x11 Gaussian window
//! (sigma 1.5) with K1 = 0.01, K2 = 0.03, averaged over channels and the
//! valid (fully-windowed) region.

use crate::error::{Error, Result};
use crate::render::{linear_to_srgb_u8, LinearImage};

pub const PSNR_CAP_DB: f64 = 99.0;

/// An sRGB-encoded 8-bit image, the domain metrics are computed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrgbImage {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB bytes, row-major.
    pub data: Vec<u8>,
}

impl SrgbImage {
    pub fn from_linear(img: &LinearImage) -> Self {
        let mut data = Vec::with_capacity((img.width * img.height * 3) as usize);
        for p in img.pixels() {
            data.push(linear_to_srgb_u8(p.x));
            data.push(linear_to_srgb_u8(p.y));
            data.push(linear_to_srgb_u8(p.z));
        }
        SrgbImage {
            width: img.width,
            height: img.height,
            data,
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width * height * 3) as usize {
            return Err(Error::domain(format!(
                "byte count {} does not match {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(SrgbImage {
            width,
            height,
            data,
        })
    }

    fn check_same_size(&self, other: &SrgbImage) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::domain(format!(
                "image size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// PSNR in dB over [0,1]-scaled values: `10 log10(1 / MSE)`, capped.
pub fn psnr_values(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    a.check_same_size(b)?;
    let av: Vec<f64> = a.data.iter().map(|&v| v as f64 / 255.0).collect();
    let bv: Vec<f64> = b.data.iter().map(|&v| v as f64 / 255.0).collect();
    Ok(psnr_values(&av, &bv))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-region convolution with the SSIM Gaussian.
fn blur_valid(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    // Horizontal pass.
    let wv = w - 2 * r;
    let mut tmp = vec![0.0; wv * h];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * wv + x] = acc;
        }
    }
    // Vertical pass.
    let hv = h - 2 * r;
    let mut out = vec![0.0; wv * hv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    (out, wv, hv)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mu_a, wv, hv) = blur_valid(a, w, h);
    let (mu_b, _, _) = blur_valid(b, w, h);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, _, _) = blur_valid(&aa, w, h);
    let (e_bb, _, _) = blur_valid(&bb, w, h);
    let (e_ab, _, _) = blur_valid(&ab, w, h);
    let mut total = 0.0;
    for i in 0..wv * hv {
        let var_a = (e_aa[i] - mu_a[i] * mu_a[i]).max(0.0);
        let var_b = (e_bb[i] - mu_b[i] * mu_b[i]).max(0.0);
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
            / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
        total += s;
    }
    total / (wv * hv) as f64
}

/// Mean SSIM over the three channels.
pub fn ssim(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    a.check_same_size(b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0;
    for ch in 0..3 {
        let av: Vec<f64> = a.data[ch..].iter().step_by(3).map(|&v| v as f64 / 255.0).collect();
        let bv: Vec<f64> = b.data[ch..].iter().step_by(3).map(|&v| v as f64 / 255.0).collect();
        total += ssim_channel(&av, &bv, w, h);
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(width: u32, height: u32, value: u8) -> SrgbImage {
        SrgbImage::from_raw(width, height, vec![value; (width * height * 3) as usize]).unwrap()
    }

    #[test]
    fn identical_images_cap() {
        let a = flat(16, 16, 123);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_from_known_mse() {
        // MSE = 0.01 on [0,1] values -> exactly 20 dB.
        let a = vec![0.0; 100];
        let b = vec![0.1; 100];
        assert!((psnr_values(&a, &b) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_endpoints() {
        let black = flat(16, 16, 0);
        let white = flat(16, 16, 255);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        let s = ssim(&black, &white).unwrap();
        assert!(s < 0.01, "ssim {s}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut a = flat(16, 16, 0);
        let mut b = flat(16, 16, 0);
        for i in 0..a.data.len() {
            a.data[i] = (i * 31 % 251) as u8;
            b.data[i] = (i * 17 % 239) as u8;
        }
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = flat(16, 16, 10);
        let b = flat(16, 8, 10);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_penalizes_structure_loss() {
        // A checkerboard against its blurred-to-gray version: same mean,
        // destroyed structure.
        let n = 32u32;
        let mut a = flat(n, n, 0);
        for y in 0..n {
            for x in 0..n {
                let v = if (x + y) % 2 == 0 { 40 } else { 216 };
                for ch in 0..3 {
                    a.data[((y * n + x) * 3 + ch) as usize] = v;
                }
            }
        }
        let b = flat(n, n, 128);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.3, "ssim {s}");
        let p = psnr(&a, &b).unwrap();
        assert!(p < 15.0, "psnr {p}");
    }
}
