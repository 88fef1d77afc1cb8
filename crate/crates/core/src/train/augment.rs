use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::synth::ImageGrid;

/// Geometric view augmentations for square grids.
///
/// Findings are tied to patch positions, so flips and quarter turns change
/// what an image depicts; they are available but off by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Largest translation in pixels along each axis; edges are replicated.
    pub max_shift: usize,
    pub flips: bool,
    pub rot90: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            max_shift: 2,
            flips: false,
            rot90: false,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            max_shift: 0,
            flips: false,
            rot90: false,
        }
    }
}

pub fn augment_image(image: &ImageGrid, aug: &Augment, rng_seed: u64) -> ImageGrid {
    let n = image.size;
    let mut rng = seed::rng(rng_seed);
    let s = aug.max_shift.min(n.saturating_sub(1)) as i64;
    let (dy, dx) = if s > 0 {
        (rng.random_range(-s..=s), rng.random_range(-s..=s))
    } else {
        (0, 0)
    };
    let flip = aug.flips && rng.random_bool(0.5);
    let turns = if aug.rot90 { rng.random_range(0..4) } else { 0 };

    let last = n as i64 - 1;
    let mut pixels = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            // Source coordinate after undoing rotation, flip and shift.
            let (mut sr, mut sc) = (r, c);
            for _ in 0..turns {
                (sr, sc) = (sc, n - 1 - sr);
            }
            if flip {
                sc = n - 1 - sc;
            }
            let sr = (sr as i64 - dy).clamp(0, last) as usize;
            let sc = (sc as i64 - dx).clamp(0, last) as usize;
            pixels.push(image.pixels[sr * n + sc]);
        }
    }
    ImageGrid { size: n, pixels }
}
