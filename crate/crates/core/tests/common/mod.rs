#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use warpformer::dataio::{build_grid, EventSeries, Grid};
use warpformer::ParamStore;

pub fn random_grid(rng: &mut ChaCha8Rng, k: usize, max_events: usize) -> Grid {
    let mut s = EventSeries::new(k);
    for v in 0..k {
        let n = rng.random_range(0..=max_events);
        let mut t = 0.0;
        for _ in 0..n {
            t += rng.random_range(0.1..2.0);
            s.variates[v].push((t, rng.random_range(-2.0..2.0)));
        }
    }
    if s.observation_count() == 0 {
        s.variates[0].push((0.5, 1.0));
    }
    build_grid(&s).unwrap()
}

/// Shifts every parameter by a small random amount so that finite
/// differences do not straddle ReLU kinks at zero-initialized biases.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids() {
        for x in store.value_mut(id).data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
}

/// Checks a row-major `ln x lo` transform: normalized rows, one contiguous
/// support interval per row, non-decreasing support starts and, when
/// `expect_full` is set, no empty rows.
pub fn check_transform(a: &[f64], ln: usize, lo: usize, expect_full: bool) -> Result<(), String> {
    let mut last_start = 0;
    for j in 0..ln {
        let row = &a[j * lo..(j + 1) * lo];
        if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(format!("row {j} has a negative or non-finite weight: {row:?}"));
        }
        let support: Vec<usize> = (0..lo).filter(|&i| row[i] > 0.0).collect();
        let Some(&start) = support.first() else {
            if expect_full {
                return Err(format!("row {j} is empty"));
            }
            continue;
        };
        let end = *support.last().unwrap();
        if end - start + 1 != support.len() {
            return Err(format!("row {j} support is not contiguous: {support:?}"));
        }
        if start < last_start {
            return Err(format!("row {j} starts at {start} before {last_start}"));
        }
        last_start = start;
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("row {j} sums to {sum}"));
        }
    }
    Ok(())
}

/// Pairwise-counting AUROC.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Mean over positives of the precision among everything scored at least as
/// high as that positive.
pub fn auprc_walk(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &p in &positives {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= scores[p]).collect();
        let hits = above.iter().filter(|&&i| labels[i]).count();
        total += hits as f64 / above.len() as f64;
    }
    Some(total / positives.len() as f64)
}
