use crate::gprf::ScalarField;
use crate::world::{true_beta_at, Scenario, WorldError};

/// Fraction of cells whose estimated class matches the true one, with
/// classes separated at the midpoints between the distinct true β values.
pub fn classification_accuracy(mean: &ScalarField, scenario: &Scenario) -> Result<f64, WorldError> {
    let levels = scenario.distinct_betas();
    let cuts: Vec<f64> = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let class = |v: f64| cuts.iter().filter(|&&c| v > c).count();
    let mut correct = 0usize;
    for (i, &v) in mean.values.iter().enumerate() {
        let truth = true_beta_at(scenario, &mean.spec.point_at(i))?;
        if class(v) == class(truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / mean.values.len() as f64)
}

const BINS: usize = 256;
const MAX_DEPTH: usize = 3;
/// Classes smaller than this fraction of the cells are not split off.
const MIN_CLASS_FRACTION: f64 = 0.05;

/// Number of distinct deformability levels in `mean`, by repeated
/// two-class isopleth splits that keep a split only when the class means
/// differ by at least `min_contrast`.
pub fn count_regions(mean: &ScalarField, min_contrast: f64) -> usize {
    let values = mean.values.clone();
    let floor = (MIN_CLASS_FRACTION * values.len() as f64).ceil() as usize;
    split(&values, min_contrast, floor.max(1), 0)
}

fn split(values: &[f64], min_contrast: f64, min_size: usize, depth: usize) -> usize {
    if depth == MAX_DEPTH || values.len() < 2 * min_size {
        return 1;
    }
    let Some(cut) = otsu_threshold(values) else {
        return 1;
    };
    let (lo, hi): (Vec<f64>, Vec<f64>) = values.iter().partition(|&&v| v <= cut);
    if lo.len() < min_size || hi.len() < min_size {
        return 1;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if mean(&hi) - mean(&lo) < min_contrast {
        return 1;
    }
    split(&lo, min_contrast, min_size, depth + 1) + split(&hi, min_contrast, min_size, depth + 1)
}

/// Level maximising the between-class variance of a histogram of `values`.
fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    let mut sums = [0f64; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
        sums[b] += v;
    }
    let total = values.len() as f64;
    let grand: f64 = sums.iter().sum();
    let (mut n0, mut s0) = (0f64, 0f64);
    let mut best: Option<(f64, usize)> = None;
    for b in 0..BINS - 1 {
        n0 += hist[b] as f64;
        s0 += sums[b];
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let d = s0 / n0 - (grand - s0) / n1;
        let score = n0 * n1 * d * d;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, b));
        }
    }
    best.map(|(_, b)| lo + (b + 1) as f64 * width)
}
