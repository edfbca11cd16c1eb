//! Pixel canvases and their mapping onto the `[-1, 1]` network input range.

use serde::{Deserialize, Serialize};

/// A pixel grid. Pixel centres sit at integer coordinates `0..width`,
/// `0..height`; `x` runs along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas { width, height }
    }

    pub fn square(side: usize) -> Self {
        Canvas::new(side, side)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn max_side(&self) -> usize {
        self.width.max(self.height)
    }

    /// Whether `(x, y)` lies in `[0, width) x [0, height)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x.clamp(0.0, self.width.saturating_sub(1) as f64),
            y.clamp(0.0, self.height.saturating_sub(1) as f64),
        )
    }

    /// Pixel units per unit of normalized coordinate, per axis.
    pub fn half_extent(&self) -> (f64, f64) {
        (half_extent(self.width), half_extent(self.height))
    }
}

/// Pixels per normalized unit along an axis of `n` samples; a single-sample
/// axis collapses to the origin and reports 1 so scaling stays finite.
pub fn half_extent(n: usize) -> f64 {
    if n <= 1 {
        1.0
    } else {
        (n - 1) as f64 / 2.0
    }
}

/// Affine map of a sample index in `[0, n-1]` onto `[-1, 1]`.
pub fn to_unit(v: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * v / (n - 1) as f64 - 1.0
    }
}

pub fn from_unit(u: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (u + 1.0) * (n - 1) as f64 / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_map_round_trips() {
        for n in [2usize, 7, 112, 224] {
            for v in [0.0, 1.5, (n - 1) as f64] {
                assert!((from_unit(to_unit(v, n), n) - v).abs() < 1e-12);
            }
            assert_eq!(to_unit(0.0, n), -1.0);
            assert_eq!(to_unit((n - 1) as f64, n), 1.0);
        }
    }

    #[test]
    fn single_sample_axis_maps_to_origin() {
        assert_eq!(to_unit(0.0, 1), 0.0);
        assert_eq!(to_unit(5.0, 1), 0.0);
    }

    #[test]
    fn canvas_containment_is_half_open() {
        let c = Canvas::new(4, 3);
        assert!(c.contains(0.0, 0.0));
        assert!(c.contains(3.9, 2.9));
        assert!(!c.contains(4.0, 0.0));
        assert!(!c.contains(-0.1, 1.0));
    }
}
