use rand_distr::{Distribution, Normal};

use super::{Language, LatentFindings};
use crate::error::{Error, Result};
use crate::seed;

pub const BACKGROUND: f64 = 0.2;

/// Square grayscale grid, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub size: usize,
    pub pixels: Vec<f64>,
}

/// Grid of finding patches: `cols` is the smallest power of two whose
/// square covers `f_count`, `rows = ceil(f_count / cols)`.
pub fn patch_layout(f_count: usize) -> (usize, usize) {
    let mut cols = 1;
    while cols * cols < f_count {
        cols *= 2;
    }
    (f_count.div_ceil(cols).max(1), cols)
}

fn patch_bounds(size: usize, f_count: usize, k: usize) -> (usize, usize, usize, usize) {
    let (rows, cols) = patch_layout(f_count);
    let (ph, pw) = (size / rows, size / cols);
    let (pr, pc) = (k / cols, k % cols);
    (pr * ph, ph, pc * pw, pw)
}

/// Renders findings as brightened, textured patches over a flat background,
/// then adds Gaussian noise and clamps to `[0, 1]`.
pub fn render_image(
    findings: &LatentFindings,
    noise_sigma: f64,
    rng_seed: u64,
    size: usize,
) -> Result<ImageGrid> {
    let f = findings.len();
    let (rows, cols) = patch_layout(f);
    if size == 0 || !size.is_multiple_of(rows) || !size.is_multiple_of(cols) {
        return Err(Error::Config(format!(
            "image size {size} is not tileable by a {rows}x{cols} finding layout"
        )));
    }
    let mut pixels = vec![BACKGROUND; size * size];
    for k in findings.set_indices() {
        let (r0, ph, c0, pw) = patch_bounds(size, f, k);
        for r in 0..ph {
            for c in 0..pw {
                let texture = ((r / 2 + c / 2 + k) % 2) as f64;
                pixels[(r0 + r) * size + c0 + c] += 0.3 + 0.2 * texture;
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::Config(format!("noise sigma {noise_sigma}: {e}")))?;
        let mut rng = seed::rng(rng_seed);
        pixels.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(ImageGrid { size, pixels })
}

/// Acquisition signature of a language community: Spanish-site images carry
/// a left-to-right intensity ramp of height `strength`; English images are
/// left untouched.
pub fn apply_site_style(image: &mut ImageGrid, language: Language, strength: f64) {
    if language != Language::Sp || strength == 0.0 || image.size < 2 {
        return;
    }
    let n = image.size;
    for r in 0..n {
        for c in 0..n {
            let p = &mut image.pixels[r * n + c];
            *p = (*p + strength * c as f64 / (n - 1) as f64).clamp(0.0, 1.0);
        }
    }
}
