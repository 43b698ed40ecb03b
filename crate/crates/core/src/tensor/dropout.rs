use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Keep flags for one activated layer, one row per batch sample.
///
/// Kept units are scaled by `1 / (1 - p)` (inverted dropout), so running the
/// network without masks needs no rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    rows: usize,
    width: usize,
    keep: Vec<bool>,
    p: T,
}

impl<T: Real> DropoutMask<T> {
    pub fn from_flags(rows: usize, width: usize, keep: Vec<bool>, p: T) -> Result<Self> {
        check_rate(p)?;
        if keep.len() != rows * width {
            return Err(Error::Dimension(format!(
                "mask has {} flags for {rows}x{width}",
                keep.len()
            )));
        }
        Ok(DropoutMask { rows, width, keep, p })
    }

    pub fn all_kept(rows: usize, width: usize) -> Self {
        DropoutMask {
            rows,
            width,
            keep: vec![true; rows * width],
            p: T::zero(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rate(&self) -> T {
        self.p
    }

    pub fn keep_probability(&self) -> T {
        T::one() - self.p
    }

    pub fn scale(&self) -> T {
        T::one() / (T::one() - self.p)
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    /// Flags for batch row `i`; single-row masks broadcast.
    pub fn row(&self, i: usize) -> &[bool] {
        let r = if self.rows == 1 { 0 } else { i };
        &self.keep[r * self.width..(r + 1) * self.width]
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len().max(1) as f64
    }
}

fn check_rate<T: Real>(p: T) -> Result<()> {
    if !(p >= T::zero() && p < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

fn draw<T: Real>(rows: usize, width: usize, p: T, rng: &mut Rng) -> DropoutMask<T> {
    let keep_prob = (T::one() - p).as_f64();
    let keep = if p == T::zero() {
        vec![true; rows * width]
    } else {
        (0..rows * width).map(|_| rng.random::<f64>() < keep_prob).collect()
    };
    DropoutMask { rows, width, keep, p }
}

/// One single-row mask per entry of `layer_sizes`, with independent
/// Bernoulli(1 - p) keep flags.
pub fn draw_dropout_masks<T: Real>(layer_sizes: &[usize], p: T, rng: &mut Rng) -> Result<Vec<DropoutMask<T>>> {
    draw_batch_masks(layer_sizes, 1, p, rng)
}

/// Like [`draw_dropout_masks`] with a separate row of flags per batch sample.
pub fn draw_batch_masks<T: Real>(
    layer_sizes: &[usize],
    batch: usize,
    p: T,
    rng: &mut Rng,
) -> Result<Vec<DropoutMask<T>>> {
    check_rate(p)?;
    Ok(layer_sizes.iter().map(|&w| draw(batch, w, p, rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_rate_keeps_everything() {
        let m = draw_dropout_masks::<f64>(&[5, 7], 0.0, &mut stream(0, "d", 0)).unwrap();
        assert!(m.iter().all(|m| m.keep_flags().iter().all(|&k| k)));
        assert_eq!(m[0].scale(), 1.0);
    }

    #[test]
    fn keep_rate_concentrates() {
        let m = draw_dropout_masks::<f64>(&[10_000], 0.3, &mut stream(1, "d", 0)).unwrap();
        let rate = m[0].kept_fraction();
        assert!((rate - 0.7).abs() < 0.02, "{rate}");
    }

    #[test]
    fn deterministic_in_rng() {
        let a = draw_dropout_masks::<f64>(&[64, 64], 0.3, &mut stream(2, "d", 0)).unwrap();
        let b = draw_dropout_masks::<f64>(&[64, 64], 0.3, &mut stream(2, "d", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_rate_of_one() {
        assert!(draw_dropout_masks::<f64>(&[3], 1.0, &mut stream(0, "d", 0)).is_err());
        assert!(draw_dropout_masks::<f64>(&[3], -0.1, &mut stream(0, "d", 0)).is_err());
    }
}
