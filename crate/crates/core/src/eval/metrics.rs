//! Reconstruction metrics on images in `[-1, 1]`.

use crate::codec::Image;
use crate::error::{bail_shape, Result};

/// Peak-to-peak range of `[-1, 1]` pixels.
pub const PSNR_PEAK: f64 = 2.0;

fn check(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || a.data.len() != b.data.len() {
        bail_shape!("images {}×{} and {}×{} differ in size", a.height, a.width, b.height, b.width);
    }
    if a.data.is_empty() {
        bail_shape!("empty image");
    }
    Ok(())
}

/// Mean absolute error over all pixels and channels.
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(s / a.data.len() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(peak² / mse)` with peak 2; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (PSNR_PEAK * PSNR_PEAK / m).log10() })
}

/// Mean squared difference between two oracle feature grids.
pub fn feature_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail_shape!("feature grids of length {} and {}", a.len(), b.len());
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}
