//! Image quality metrics: PSNR, SSIM, and a high-frequency PSNR that compares
//! Laplacian responses instead of raw pixels.
//!
//! SSIM follows the standard windowed formulation: an 11x11 Gaussian window
//! with sigma 1.5, stability constants K1 = 0.01 and K2 = 0.03 on a unit
//! dynamic range, population (uncorrected) variance weighting, and the score
//! averaged over fully valid window positions only. Multichannel images score
//! each channel independently and average.

use crate::error::{Error, Result};
use crate::raster::{Image, Plane};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB against the given peak value.
/// Identical inputs (zero mean squared error) give +infinity.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(
            "psnr requires identically shaped images".to_string(),
        ));
    }
    let mut acc = 0.0;
    for (p, q) in a.data().iter().zip(b.data()) {
        let d = *p as f64 - *q as f64;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Valid-extent separable filtering with the given 1-D window.
fn filter_valid(p: &Plane, g: &[f64]) -> Plane {
    let k = g.len();
    let ow = p.width - k + 1;
    let oh = p.height - k + 1;
    let mut tmp = Plane::zeros(p.height, ow);
    for y in 0..p.height {
        let row = p.row(y);
        let out = tmp.row_mut(y);
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &w) in g.iter().enumerate() {
                acc += w * row[x + i];
            }
            out[x] = acc;
        }
    }
    let mut out = Plane::zeros(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &w) in g.iter().enumerate() {
                acc += w * tmp.get(y + i, x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

fn hadamard(a: &Plane, b: &Plane) -> Plane {
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o *= v;
    }
    out
}

fn ssim_plane(x: &Plane, y: &Plane) -> f64 {
    let g = gaussian_window();
    let ux = filter_valid(x, &g);
    let uy = filter_valid(y, &g);
    let uxx = filter_valid(&hadamard(x, x), &g);
    let uyy = filter_valid(&hadamard(y, y), &g);
    let uxy = filter_valid(&hadamard(x, y), &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    let n = ux.data.len();
    for i in 0..n {
        let (mx, my) = (ux.data[i], uy.data[i]);
        let vx = uxx.data[i] - mx * mx;
        let vy = uyy.data[i] - my * my;
        let cov = uxy.data[i] - mx * my;
        let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        acc += num / den;
    }
    acc / n as f64
}

/// Mean structural similarity over an 11x11 Gaussian-weighted window, averaged
/// over channels. Both dimensions must be at least the window size.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(
            "ssim requires identically shaped images".to_string(),
        ));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: a.height(),
            width: a.width(),
            min: SSIM_WINDOW,
        });
    }
    let mut acc = 0.0;
    for c in 0..a.channels() {
        acc += ssim_plane(&a.plane(c), &b.plane(c));
    }
    Ok(acc / a.channels() as f64)
}

/// Five-point Laplacian (cross kernel, center weight -4) with reflected
/// borders; the output has the same extent as the input.
pub fn laplacian(p: &Plane) -> Result<Plane> {
    if p.height < 3 || p.width < 3 {
        return Err(Error::ImageTooSmall {
            height: p.height,
            width: p.width,
            min: 3,
        });
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut out = Plane::zeros(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            let up = p.get(reflect(y as isize - 1, p.height), x);
            let down = p.get(reflect(y as isize + 1, p.height), x);
            let left = p.get(y, reflect(x as isize - 1, p.width));
            let right = p.get(y, reflect(x as isize + 1, p.width));
            out.set(y, x, (up + down + left + right) - 4.0 * p.get(y, x));
        }
    }
    Ok(out)
}

/// PSNR between the Laplacian responses of the two images, peak 1.0. Averages
/// squared error over all channels. A shared DC offset leaves it unchanged.
pub fn hf_psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(
            "hf-psnr requires identically shaped images".to_string(),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let la = laplacian(&a.plane(c))?;
        let lb = laplacian(&b.plane(c))?;
        for (p, q) in la.data.iter().zip(&lb.data) {
            let d = p - q;
            acc += d * d;
        }
        count += la.data.len();
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// The three quality scores of a restored image against its reference.
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub hf_psnr: f64,
}

/// Score `image` against `reference` on a unit dynamic range.
pub fn evaluate_pair(reference: &Image, image: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(reference, image, 1.0)?,
        ssim: ssim(reference, image)?,
        hf_psnr: hf_psnr(reference, image)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| f(y, x))
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = image_from(8, 8, |y, x| ((y * 8 + x) as f32) / 64.0);
        let v = psnr(&a, &a, 1.0).unwrap();
        assert!(v.is_infinite() && v > 0.0);
        assert_eq!(format!("{v}"), "inf");
    }

    #[test]
    fn psnr_closed_form_and_symmetry() {
        let a = image_from(4, 4, |_, _| 0.25);
        let b = image_from(4, 4, |_, _| 0.75);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 6.020599913279624).abs() < 1e-9, "{v}");
        assert_eq!(v, psnr(&b, &a, 1.0).unwrap());

        // Quadrupling the peak adds 20 log10(4) dB.
        let v4 = psnr(&a, &b, 4.0).unwrap();
        assert!((v4 - v - 20.0 * 4.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Image::zeros(4, 4, 1);
        let b = Image::zeros(4, 5, 1);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Image::from_fn(16, 16, 3, |_, _, _| rng.gen::<f32>());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_two_constants_matches_closed_form() {
        // Zero variance collapses the structure term; only the luminance
        // comparison (2 m1 m2 + C1) / (m1^2 + m2^2 + C1) remains.
        let a = image_from(12, 12, |_, _| 0.4);
        let b = image_from(12, 12, |_, _| 0.6);
        let c1 = 1e-4;
        let expect = (2.0 * 0.4f64 * 0.6 + c1) / (0.4f64 * 0.4 + 0.6 * 0.6 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn ssim_decreases_with_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = image_from(24, 24, |y, x| 0.5 + 0.3 * ((y + x) as f32 / 48.0));
        let noise: Vec<f32> = (0..24 * 24).map(|_| rng.gen::<f32>() - 0.5).collect();
        let with = |amp: f32| {
            Image::from_fn(24, 24, 1, |y, x, _| base.get(y, x, 0) + amp * noise[y * 24 + x])
        };
        let s_small = ssim(&base, &with(0.05)).unwrap();
        let s_large = ssim(&base, &with(0.2)).unwrap();
        assert!(s_small > s_large, "{s_small} vs {s_large}");
        assert!(s_small < 1.0);
    }

    #[test]
    fn ssim_rejects_images_below_the_window_size() {
        let a = Image::zeros(10, 16, 1);
        assert!(matches!(
            ssim(&a, &a),
            Err(Error::ImageTooSmall { min: 11, .. })
        ));
    }

    // Frozen reference values from an independent SSIM implementation
    // (windowed Gaussian weighting, sigma 1.5, population covariance,
    // valid-window averaging) evaluated on these exact patterns.
    #[test]
    fn ssim_matches_frozen_reference_values() {
        let x1 = image_from(32, 32, |i, j| {
            if (i * 7 + j * 13) % 5 < 2 {
                1.0
            } else {
                0.0
            }
        });
        let y1 = Image::from_fn(32, 32, 1, |i, j, _| 1.0 - x1.get(i, j, 0));
        let got1 = ssim(&x1, &y1).unwrap();
        assert!(
            (got1 - (-0.919497703284635)).abs() < 1e-6,
            "binary inverse: {got1}"
        );

        let x2 = image_from(32, 32, |i, j| ((i + j) % 7) as f32 / 6.0);
        let y2 = Image::from_fn(32, 32, 1, |i, j, _| 0.75 * x2.get(i, j, 0) + 0.1);
        let got2 = ssim(&x2, &y2).unwrap();
        assert!(
            (got2 - 0.958855389599666).abs() < 1e-6,
            "affine ramp: {got2}"
        );
    }

    #[test]
    fn laplacian_of_constant_is_zero_everywhere() {
        let p = Plane::from_fn(7, 9, |_, _| 3.25);
        let l = laplacian(&p).unwrap();
        assert!(l.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_ramp_is_zero_inside_and_slope_at_the_border() {
        let slope = 0.125;
        let p = Plane::from_fn(6, 8, |_, x| slope * x as f64);
        let l = laplacian(&p).unwrap();
        for y in 0..6 {
            for x in 1..7 {
                assert!(l.get(y, x).abs() < 1e-12);
            }
            // Reflection clamps the out-of-range neighbor to the edge value,
            // leaving one second difference worth of slope.
            assert!((l.get(y, 0) - slope).abs() < 1e-12);
            assert!((l.get(y, 7) + slope).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_imprints_the_cross_kernel_on_an_impulse() {
        let p = Plane::from_fn(7, 7, |y, x| if y == 3 && x == 3 { 1.0 } else { 0.0 });
        let l = laplacian(&p).unwrap();
        assert_eq!(l.get(3, 3), -4.0);
        assert_eq!(l.get(2, 3), 1.0);
        assert_eq!(l.get(4, 3), 1.0);
        assert_eq!(l.get(3, 2), 1.0);
        assert_eq!(l.get(3, 4), 1.0);
        assert_eq!(l.get(2, 2), 0.0);
        let total: f64 = l.data.iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn laplacian_rejects_tiny_planes() {
        let p = Plane::zeros(2, 5);
        assert!(matches!(
            laplacian(&p),
            Err(Error::ImageTooSmall { min: 3, .. })
        ));
    }

    #[test]
    fn hf_psnr_ignores_a_shared_dc_offset() {
        // Grid values j/16 inside [0.4375, 0.875]: adding 0.1 in f32 lands
        // every value in the same binade and rounds by the same absolute
        // amount, so the Laplacians cancel exactly and the score stays
        // infinite.
        let a = image_from(16, 16, |i, j| (7 + (i * 3 + j * 5) % 8) as f32 / 16.0);
        let b = Image::from_fn(16, 16, 1, |i, j, _| a.get(i, j, 0) + 0.1);
        let plain = psnr(&a, &b, 1.0).unwrap();
        assert!(plain.is_finite());
        let hf = hf_psnr(&a, &b).unwrap();
        assert!(hf.is_infinite() && hf > 0.0, "{hf}");
    }

    #[test]
    fn hf_psnr_penalizes_texture_loss_more_than_psnr_suggests() {
        // Smoothing a textured image: plain PSNR stays moderate, the
        // Laplacian comparison drops much harder.
        let a = image_from(20, 20, |i, j| {
            0.5 + 0.2 * (((i + 2 * j) % 4) as f32 - 1.5) / 1.5
        });
        let mean = a.data().iter().sum::<f32>() / 400.0;
        let smooth = Image::from_fn(20, 20, 1, |_, _, _| mean);
        let plain = psnr(&a, &smooth, 1.0).unwrap();
        let hf = hf_psnr(&a, &smooth).unwrap();
        assert!(hf < plain, "hf {hf} vs psnr {plain}");
    }

    #[test]
    fn evaluate_pair_reports_all_three_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image::from_fn(16, 16, 3, |_, _, _| 0.3 + 0.4 * rng.gen::<f32>());
        let b = Image::from_fn(16, 16, 3, |y, x, c| a.get(y, x, c) * 0.95);
        let r = evaluate_pair(&a, &b).unwrap();
        assert!(r.psnr.is_finite() && r.psnr > 10.0);
        assert!(r.ssim > 0.5 && r.ssim < 1.0);
        assert!(r.hf_psnr.is_finite());
    }
}
