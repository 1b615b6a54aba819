//! Deterministic fixtures shared by the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srfb::Image;

/// A reproducible textured image: smooth waves plus seeded noise, clamped to
/// the unit range. Heavy enough in high frequencies to exercise the filter
/// design path realistically.
pub fn synth_image(height: usize, width: usize, channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f32 = rng.gen::<f32>() * 6.0;
    Image::from_fn(height, width, channels, |y, x, c| {
        let fy = y as f32;
        let fx = x as f32;
        let v = 0.5
            + 0.2 * (0.37 * fx + phase + c as f32).sin()
            + 0.2 * (0.53 * fy - 0.21 * fx).cos()
            + 0.05 * (rng.gen::<f32>() - 0.5);
        v.clamp(0.0, 1.0)
    })
}
