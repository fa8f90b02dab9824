//! Underwater-style image degradations.
//!
//! Fixed pipeline order: per-channel gain, Gaussian blur, contrast scaling
//! about mid-gray, additive Gaussian noise, clamp to [0, 255]. Identity
//! parameters leave the image bit-identical. All arithmetic runs in f64 on
//! the raw byte values; quantization back to bytes happens once at the end.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationParams {
    pub gain_r: f64,
    pub gain_g: f64,
    pub gain_b: f64,
    pub blur_sigma: f64,
    /// Contrast factor in (0, 1]; 1 is identity.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl DegradationParams {
    pub fn identity() -> Self {
        Self {
            gain_r: 1.0,
            gain_g: 1.0,
            gain_b: 1.0,
            blur_sigma: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// A moderate underwater look: green-blue cast, slight blur, reduced
    /// contrast, mild sensor noise.
    pub fn underwater() -> Self {
        Self {
            gain_r: 0.55,
            gain_g: 1.05,
            gain_b: 0.95,
            blur_sigma: 0.8,
            contrast: 0.65,
            noise_sigma: 6.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain_r <= 0.0 || self.gain_g <= 0.0 || self.gain_b <= 0.0 {
            return Err(Error::Config("color gains must be positive".into()));
        }
        if !(0.0 < self.contrast && self.contrast <= 1.0) {
            return Err(Error::Config(format!(
                "contrast {} outside (0, 1]",
                self.contrast
            )));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("sigmas must be non-negative".into()));
        }
        for v in [self.gain_r, self.gain_g, self.gain_b, self.blur_sigma, self.contrast, self.noise_sigma] {
            if !v.is_finite() {
                return Err(Error::Config("degradation parameter is not finite".into()));
            }
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian kernel of radius ceil(3 sigma). Sigma 0 gives the
/// identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable blur of one channel plane, edges handled by clamping the sample
/// coordinate to the image (replicate padding), which keeps flat regions
/// exactly flat.
fn blur_plane(plane: &mut [f64], w: usize, h: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Run the degradation pipeline on planar f64 channels (values in byte
/// range), without the final quantization. Exposed so tests can inspect
/// pre-quantization values.
pub fn degrade_planes(
    planes: &mut [Vec<f64>; 3],
    w: usize,
    h: usize,
    params: &DegradationParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.validate()?;
    for p in planes.iter() {
        if p.len() != w * h {
            return Err(Error::Dim(format!(
                "plane has {} values, expected {}",
                p.len(),
                w * h
            )));
        }
    }
    let gains = [params.gain_r, params.gain_g, params.gain_b];
    for (plane, g) in planes.iter_mut().zip(gains) {
        if g != 1.0 {
            for v in plane.iter_mut() {
                *v *= g;
            }
        }
    }
    if params.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(params.blur_sigma);
        for plane in planes.iter_mut() {
            blur_plane(plane, w, h, &kernel);
        }
    }
    if params.contrast != 1.0 {
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = 127.5 + params.contrast * (*v - 127.5);
            }
        }
    }
    if params.noise_sigma > 0.0 {
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v += params.noise_sigma * normal(rng);
            }
        }
    }
    Ok(())
}

/// Degrade an interleaved RGB byte image in place.
pub fn degrade(
    rgb: &mut [u8],
    w: usize,
    h: usize,
    params: &DegradationParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Dim(format!(
            "image has {} bytes, expected {}",
            rgb.len(),
            w * h * 3
        )));
    }
    if params.is_identity() {
        params.validate()?;
        return Ok(());
    }
    let mut planes: [Vec<f64>; 3] = [
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
    ];
    for px in rgb.chunks_exact(3) {
        for c in 0..3 {
            planes[c].push(px[c] as f64);
        }
    }
    degrade_planes(&mut planes, w, h, params, rng)?;
    for (i, px) in rgb.chunks_exact_mut(3).enumerate() {
        for c in 0..3 {
            px[c] = planes[c][i].round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_params_are_a_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut img: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let orig = img.clone();
        degrade(&mut img, 5, 4, &DegradationParams::identity(), &mut rng).unwrap();
        assert_eq!(img, orig);
    }

    #[test]
    fn contrast_scales_two_tone_difference_exactly() {
        // Pre-clamp, contrast about mid-gray is affine: the difference
        // between two tones scales by exactly c.
        let c = 0.5;
        let params = DegradationParams { contrast: c, ..DegradationParams::identity() };
        let mut planes: [Vec<f64>; 3] =
            [vec![200.0, 80.0], vec![200.0, 80.0], vec![200.0, 80.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        degrade_planes(&mut planes, 2, 1, &params, &mut rng).unwrap();
        for p in &planes {
            assert_eq!(p[0] - p[1], c * (200.0 - 80.0));
        }
    }

    #[test]
    fn kernel_radius_and_normalization() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7); // radius ceil(3) = 3
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(0.7);
        assert_eq!(k.len(), 7); // radius ceil(2.1) = 3
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn blur_keeps_flat_image_flat() {
        let params = DegradationParams { blur_sigma: 1.3, ..DegradationParams::identity() };
        let mut planes: [Vec<f64>; 3] =
            [vec![100.0; 36], vec![50.0; 36], vec![200.0; 36]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        degrade_planes(&mut planes, 6, 6, &params, &mut rng).unwrap();
        for (p, want) in planes.iter().zip([100.0, 50.0, 200.0]) {
            for &v in p {
                assert!((v - want).abs() < 1e-9, "flat value drifted to {v}");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = DegradationParams { gain_r: 0.0, ..DegradationParams::identity() };
        assert!(bad.validate().is_err());
        let bad = DegradationParams { contrast: 0.0, ..DegradationParams::identity() };
        assert!(bad.validate().is_err());
        let bad = DegradationParams { contrast: 1.2, ..DegradationParams::identity() };
        assert!(bad.validate().is_err());
        let bad = DegradationParams { noise_sigma: -1.0, ..DegradationParams::identity() };
        assert!(bad.validate().is_err());
    }
}
