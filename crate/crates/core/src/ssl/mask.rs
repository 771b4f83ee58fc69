//! Blockwise masking of the patch-token grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MIN_BLOCK_AREA: usize = 4;
const ASPECT_MIN: f64 = 0.3;
const MAX_FAILED_ATTEMPTS: usize = 50;

/// Masks exactly `round(ratio·G²)` grid positions as a union of rectangular
/// blocks, row-major over a `G×G` grid.
///
/// Blocks have area in `[min(4, remaining), remaining]` and aspect ratio
/// log-uniform in `[0.3, 1/0.3]`; a block is accepted only if it adds between
/// 1 and `remaining` new positions. When sampling stalls, single cells adjacent
/// to the masked region are added so the count is always exact.
pub fn blockwise_mask(grid_side: usize, ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if grid_side == 0 {
        return Err(Error::invalid("grid side must be positive"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let g = grid_side;
    let n = g * g;
    let target = (ratio * n as f64).round() as usize;
    if target == 0 {
        return Ok(vec![false; n]);
    }
    if target >= n {
        return Ok(vec![true; n]);
    }
    let mut mask = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (log_lo, log_hi) = (ASPECT_MIN.ln(), -ASPECT_MIN.ln());
    let mut count = 0;
    let mut failures = 0;
    while count < target {
        let remaining = target - count;
        if failures >= MAX_FAILED_ATTEMPTS {
            grow_one(&mut mask, g, &mut rng);
            count += 1;
            failures = 0;
            continue;
        }
        let area = rng.random_range(MIN_BLOCK_AREA.min(remaining)..=remaining) as f64;
        let aspect = rng.random_range(log_lo..log_hi).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > g || w > g {
            failures += 1;
            continue;
        }
        let top = rng.random_range(0..=g - h);
        let left = rng.random_range(0..=g - w);
        let fresh = (top..top + h)
            .flat_map(|r| (left..left + w).map(move |c| r * g + c))
            .filter(|&i| !mask[i])
            .count();
        if fresh == 0 || fresh > remaining {
            failures += 1;
            continue;
        }
        for r in top..top + h {
            for c in left..left + w {
                mask[r * g + c] = true;
            }
        }
        count += fresh;
        failures = 0;
    }
    Ok(mask)
}

/// Marks one unmasked cell that touches the masked region (any cell if the
/// region is empty).
fn grow_one(mask: &mut [bool], g: usize, rng: &mut ChaCha8Rng) {
    let touches = |i: usize| {
        let (r, c) = (i / g, i % g);
        (r > 0 && mask[i - g])
            || (r + 1 < g && mask[i + g])
            || (c > 0 && mask[i - 1])
            || (c + 1 < g && mask[i + 1])
    };
    let mut candidates: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i] && touches(i)).collect();
    if candidates.is_empty() {
        candidates = (0..mask.len()).filter(|&i| !mask[i]).collect();
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    mask[pick] = true;
}
