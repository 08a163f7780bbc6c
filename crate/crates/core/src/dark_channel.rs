//! Dark channel maps and the L2 dark channel loss.
//!
//! The dark channel of an image at pixel `p` is the smallest intensity over
//! all color channels inside the window centred on `p`. Sharp natural images
//! have mostly near-zero dark channels; blur averages dark pixels with bright
//! neighbours and lifts it. The loss compares the dark channel of a restored
//! image with that of the ground truth using a mean squared difference, which
//! unlike an L0 count is differentiable almost everywhere.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Default window extent.
pub const DEFAULT_WINDOW: usize = 15;
/// One 8-bit quantization level.
pub const DEFAULT_SPARSITY_THRESHOLD: Real = 1.0 / 255.0;

/// Location of the element that won the minimum for one output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArgminSource {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

impl ArgminSource {
    /// Offset of the source from the output pixel `(row, col)`.
    pub fn offset_from(&self, row: usize, col: usize) -> (isize, isize) {
        (
            self.row as isize - row as isize,
            self.col as isize - col as isize,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarkChannelMap {
    /// `(n, 1, h, w)`.
    pub values: Tensor,
    pub window: usize,
    /// One entry per element of `values`, in the same order.
    pub argmin: Vec<ArgminSource>,
}

fn check_image(shape: &[usize], window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "dark channel window must be a positive odd integer, got {window}"
        )));
    }
    match shape {
        [_, 1 | 3, _, _] => Ok(()),
        _ => Err(Error::dim(format!(
            "dark channel needs a (n, 1|3, h, w) image, got {shape:?}"
        ))),
    }
}

/// Records the dark channel of `image` on `tape`.
pub fn dark_channel(tape: &mut Tape, image: Var, window: usize) -> Result<Var> {
    check_image(tape.value(image).shape(), window)?;
    tape.min_pool_channels_window(image, window)
}

/// Dark channel map of a `(n, c, h, w)` image with values in `[0, 1]`.
pub fn dark_channel_map(image: &Tensor, window: usize) -> Result<DarkChannelMap> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let map = dark_channel(&mut tape, x, window)?;
    let (_, c, h, w) = image.dims4()?;
    let plane = h * w;
    let argmin = tape
        .argmin(map)
        .expect("min pool node")
        .iter()
        .map(|&i| {
            let within = i % (c * plane);
            ArgminSource {
                channel: within / plane,
                row: (within % plane) / w,
                col: within % w,
            }
        })
        .collect();
    Ok(DarkChannelMap {
        values: tape.value(map).clone(),
        window,
        argmin,
    })
}

/// Mean squared difference between the dark channels of `restored` and
/// `sharp`. Both are expected in `[0, 1]`; gradients reach `restored` only.
pub fn dark_channel_loss(tape: &mut Tape, restored: Var, sharp: Var, window: usize) -> Result<Var> {
    tape.value(restored)
        .expect_same_shape(tape.value(sharp), "dark_channel_loss")?;
    let sharp = tape.detach(sharp);
    let a = dark_channel(tape, restored, window)?;
    let b = dark_channel(tape, sharp, window)?;
    tape.mean_sq_diff(a, b)
}

/// Fraction of dark channel pixels strictly above `threshold`.
pub fn dark_channel_sparsity(image: &Tensor, window: usize, threshold: Real) -> Result<Real> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::config(format!(
            "sparsity threshold must be >= 0, got {threshold}"
        )));
    }
    let map = dark_channel_map(image, window)?;
    let above = map.values.data().iter().filter(|&&v| v > threshold).count();
    Ok(above as Real / map.values.len() as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Exhaustive oracle: triple loop over window rows, window cols and
    /// channels with clamped coordinates.
    fn brute_force(image: &Tensor, window: usize) -> Vec<Real> {
        let (n, c, h, w) = image.dims4().unwrap();
        let r = (window / 2) as isize;
        let mut out = Vec::new();
        for b in 0..n {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut m = Real::INFINITY;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                            for ch in 0..c {
                                m = m.min(image.at4(b, ch, yy, xx));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn constant_image() {
        let map = dark_channel_map(&Tensor::full(&[1, 3, 6, 6], 0.4), 3).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn whole_image_window_gives_global_min() {
        let mut r = rng::seeded(4);
        let img = Tensor::uniform(&[1, 3, 7, 5], 0.0, 1.0, &mut r);
        let map = dark_channel_map(&img, 15).unwrap();
        assert!(map.values.data().iter().all(|&v| v == img.min()));
    }

    #[test]
    fn center_zero_spreads_to_window() {
        let mut img = Tensor::full(&[1, 3, 5, 5], 0.8);
        for c in 0..3 {
            img.data_mut()[c * 25 + 12] = 0.0;
        }
        let map = dark_channel_map(&img, 3).unwrap();
        let oracle = brute_force(&img, 3);
        assert_eq!(map.values.data(), oracle.as_slice());
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(map.values.data()[y * 5 + x] == 0.0, inside);
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_images() {
        let mut r = rng::seeded(16);
        for _ in 0..5 {
            let img = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
            let map = dark_channel_map(&img, 5).unwrap();
            assert_eq!(map.values.data(), brute_force(&img, 5).as_slice());
            for (i, src) in map.argmin.iter().enumerate() {
                let (b, p) = (i / 256, i % 256);
                assert_eq!(
                    img.at4(b, src.channel, src.row, src.col),
                    map.values.data()[i]
                );
                let (dy, dx) = src.offset_from(p / 16, p % 16);
                assert!(dy.abs() <= 2 && dx.abs() <= 2);
            }
        }
    }

    #[test]
    fn window_one_on_gray_is_identity() {
        let mut r = rng::seeded(8);
        let img = Tensor::uniform(&[1, 1, 6, 9], 0.0, 1.0, &mut r);
        assert_eq!(dark_channel_map(&img, 1).unwrap().values, img);
    }

    #[test]
    fn rejects_bad_windows_and_channels() {
        let img = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(dark_channel_map(&img, 4), Err(Error::Config(_))));
        assert!(matches!(dark_channel_map(&img, 0), Err(Error::Config(_))));
        assert!(dark_channel_map(&Tensor::zeros(&[1, 2, 4, 4]), 3).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let mut r = rng::seeded(2);
        let a = tape.variable(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r));
        let l = dark_channel_loss(&mut tape, a, a, 3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let z = tape.variable(Tensor::zeros(&[1, 3, 8, 8]));
        let o = tape.variable(Tensor::ones(&[1, 3, 8, 8]));
        let l = dark_channel_loss(&mut tape, z, o, 3).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).is_some());
        assert!(g.get(o).is_none());
        let small = tape.variable(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(dark_channel_loss(&mut tape, z, small, 3).is_err());
    }

    #[test]
    fn sparsity_extremes() {
        let black = Tensor::zeros(&[1, 3, 8, 8]);
        let white = Tensor::ones(&[1, 3, 8, 8]);
        assert_eq!(dark_channel_sparsity(&black, 3, 1e-3).unwrap(), 0.0);
        assert_eq!(dark_channel_sparsity(&white, 3, 0.5).unwrap(), 1.0);
        assert!(dark_channel_sparsity(&white, 3, -1.0).is_err());
    }
}
