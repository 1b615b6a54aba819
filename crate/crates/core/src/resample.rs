//! Bicubic resampling (Catmull-Rom kernel, a = -0.5), used to synthesize the
//! low-resolution inputs from high-resolution ground truth and to pre-upsample
//! them back to the network's working size.
//!
//! Downsampling is point decimation with the bicubic kernel (no prefilter);
//! upsampling is ordinary bicubic interpolation. Both map output sample o to
//! source coordinate (o + 0.5) * in/out - 0.5 and pad borders by reflection.
//! Values leaving [0,1] are not clipped here.

use crate::error::{Error, Result};
use crate::raster::{Image, Plane};

/// Catmull-Rom cubic, the a = -0.5 member of the Keys family.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Reflect an index into [0, n): -1 maps to 0, n maps to n-1, and so on.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-output-sample taps for one axis: four source indices and their weights.
fn axis_taps(out_len: usize, in_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor() as isize;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for j in 0..4 {
                let i = base - 1 + j as isize;
                idx[j] = reflect(i, in_len);
                w[j] = cubic(src - i as f64);
            }
            (idx, w)
        })
        .collect()
}

fn resize_plane(p: &Plane, out_h: usize, out_w: usize) -> Plane {
    let h_taps = axis_taps(out_w, p.width);
    // Horizontal pass: (h, w) -> (h, out_w).
    let mut mid = Plane::zeros(p.height, out_w);
    for y in 0..p.height {
        let row = p.row(y);
        let out = mid.row_mut(y);
        for (x, (idx, w)) in h_taps.iter().enumerate() {
            out[x] = w[0] * row[idx[0]] + w[1] * row[idx[1]] + w[2] * row[idx[2]] + w[3] * row[idx[3]];
        }
    }
    // Vertical pass: (h, out_w) -> (out_h, out_w).
    let v_taps = axis_taps(out_h, p.height);
    let mut out = Plane::zeros(out_h, out_w);
    for (y, (idx, w)) in v_taps.iter().enumerate() {
        for x in 0..out_w {
            out.set(
                y,
                x,
                w[0] * mid.get(idx[0], x)
                    + w[1] * mid.get(idx[1], x)
                    + w[2] * mid.get(idx[2], x)
                    + w[3] * mid.get(idx[3], x),
            );
        }
    }
    out
}

fn check_scale(scale: usize) -> Result<()> {
    if (2..=4).contains(&scale) {
        Ok(())
    } else {
        Err(Error::BadScale(scale))
    }
}

fn resize_image(img: &Image, out_h: usize, out_w: usize) -> Image {
    let planes: Vec<Plane> = img
        .planes()
        .iter()
        .map(|p| resize_plane(p, out_h, out_w))
        .collect();
    Image::from_planes(&planes).expect("resized planes share dimensions")
}

/// Bicubic decimation by an integer factor; dimensions must divide evenly.
pub fn downsample(img: &Image, scale: usize) -> Result<Image> {
    check_scale(scale)?;
    if img.height() % scale != 0 || img.width() % scale != 0 {
        return Err(Error::NonDivisibleDims {
            height: img.height(),
            width: img.width(),
            scale,
        });
    }
    Ok(resize_image(img, img.height() / scale, img.width() / scale))
}

/// Bicubic interpolation to scale-times dimensions.
pub fn upsample(img: &Image, scale: usize) -> Result<Image> {
    check_scale(scale)?;
    Ok(resize_image(img, img.height() * scale, img.width() * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values_match_closed_form() {
        assert_eq!(cubic(0.0), 1.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
        assert_eq!(cubic(2.0), 0.0);
        // Partition of unity at the half-sample phase used by 2x scaling.
        let s = cubic(-1.5) + cubic(-0.5) + cubic(0.5) + cubic(1.5);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_survive_both_directions() {
        let img = Image::from_fn(8, 12, 3, |_, _, _| 0.5);
        for scale in [2, 3, 4] {
            let down = downsample(&img, scale);
            if img.height() % scale == 0 && img.width() % scale == 0 {
                let down = down.unwrap();
                assert!(down.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
            }
            let up = upsample(&img, scale).unwrap();
            assert_eq!(up.height(), img.height() * scale);
            assert_eq!(up.width(), img.width() * scale);
            assert!(up.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn checkerboard_collapses_to_kernel_weighted_mean() {
        let img = Image::from_fn(4, 4, 1, |y, x, _| ((y + x) % 2) as f32);
        let down = downsample(&img, 4).unwrap();
        assert_eq!((down.height(), down.width()), (1, 1));
        // Independent evaluation: separable taps at src = 1.5 over rows 0..4,
        // applied to the checkerboard directly.
        let w: Vec<f64> = (0..4).map(|i| cubic(1.5 - i as f64)).collect();
        let mut expect = 0.0;
        for (r, wr) in w.iter().enumerate() {
            for (c, wc) in w.iter().enumerate() {
                expect += wr * wc * ((r + c) % 2) as f64;
            }
        }
        assert!((down.get(0, 0, 0) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_scales_and_ragged_dims() {
        let img = Image::from_fn(4, 4, 1, |_, _, _| 0.0);
        assert!(matches!(downsample(&img, 5), Err(Error::BadScale(5))));
        assert!(matches!(upsample(&img, 1), Err(Error::BadScale(1))));
        let ragged = Image::from_fn(5, 4, 1, |_, _, _| 0.0);
        assert!(matches!(
            downsample(&ragged, 2),
            Err(Error::NonDivisibleDims { .. })
        ));
    }

    #[test]
    fn upsample_1x2_matches_separable_kernel_oracle() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = upsample(&img, 2).unwrap();
        assert_eq!((up.height(), up.width()), (2, 4));
        let input = [0.0f64, 1.0];
        for ox in 0..4 {
            let src = (ox as f64 + 0.5) * 0.5 - 0.5;
            let base = src.floor() as isize;
            let mut expect = 0.0;
            for j in 0..4 {
                let i = base - 1 + j;
                expect += cubic(src - i as f64) * input[reflect(i, 2)];
            }
            // Vertical axis is constant, and its taps sum to one.
            for oy in 0..2 {
                assert!(
                    (up.get(oy, ox, 0) as f64 - expect).abs() < 1e-6,
                    "at ({oy},{ox})"
                );
            }
        }
    }

    #[test]
    fn down_up_round_trip_stays_close_on_smooth_ramp() {
        let img = Image::from_fn(16, 16, 1, |y, x, _| (y as f32 + x as f32) / 32.0);
        let rt = downsample(&upsample(&img, 2).unwrap(), 2).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(rt.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 0.02, "round trip error {max_err}");
    }

    #[test]
    fn reflect_handles_deep_out_of_range() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 1), 0);
        assert_eq!(reflect(-3, 1), 0);
    }
}
