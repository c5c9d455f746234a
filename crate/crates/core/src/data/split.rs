use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{invalid, Result};
use crate::math;

/// Row counts for three ratios over `n` rows by largest remainder, with the
/// unselected share `1 − Σ ratios` treated as a fourth bucket.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(invalid("split ratios must be positive"));
    }
    let total: f64 = ratios.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(invalid("split ratios must sum to at most 1"));
    }
    let shares = [ratios[0], ratios[1], ratios[2], (1.0 - total).max(0.0)];
    let sizes = apportion(n, &shares);
    if sizes[..3].contains(&0) {
        return Err(invalid("a split would receive 0 rows"));
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Largest-remainder apportionment of `n` over `shares` (summing to 1).
fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut out: Vec<usize> = ideal
        .iter()
        .map(|&x| libm::floor(x + 1e-9) as usize)
        .collect();
    let mut left = n.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - out[a] as f64;
        let rb = ideal[b] - out[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Stratified, seeded partition into train/val/test.
///
/// Split sizes follow [`split_sizes`]; each class contributes either the
/// floor or the ceiling of its proportional share to every split.
pub fn split(
    dataset: &Dataset,
    ratios: &[f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    let sizes = split_sizes(n, ratios)?;
    let total: f64 = ratios.iter().sum();
    let shares = [ratios[0], ratios[1], ratios[2], (1.0 - total).max(0.0)];
    let bucket_totals = [
        sizes[0],
        sizes[1],
        sizes[2],
        n - sizes.iter().sum::<usize>(),
    ];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let counts = controlled_rounding(
        &by_class.iter().map(Vec::len).collect::<Vec<_>>(),
        &shares,
        &bucket_totals,
    );

    let mut rng = math::rng_from(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (c, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng);
        let mut at = 0;
        for (b, part) in parts.iter_mut().enumerate() {
            part.extend_from_slice(&rows[at..at + counts[c][b]]);
            at += counts[c][b];
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        dataset.select(&parts[0], "train"),
        dataset.select(&parts[1], "val"),
        dataset.select(&parts[2], "test"),
    ))
}

/// Integer table with row sums `rows[c]`, column sums `cols[b]`, and every
/// cell equal to the floor or ceiling of `rows[c]·shares[b]`.
fn controlled_rounding(rows: &[usize], shares: &[f64], cols: &[usize]) -> Vec<Vec<usize>> {
    let nb = shares.len();
    let mut table: Vec<Vec<usize>> = rows
        .iter()
        .map(|&r| {
            shares
                .iter()
                .map(|&s| libm::floor(r as f64 * s + 1e-9) as usize)
                .collect()
        })
        .collect();
    let frac = |c: usize, b: usize| {
        rows[c] as f64 * shares[b] - libm::floor(rows[c] as f64 * shares[b] + 1e-9)
    };
    let mut row_left: Vec<usize> = rows
        .iter()
        .zip(&table)
        .map(|(&r, t)| r - t.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = (0..nb)
        .map(|b| cols[b] - table.iter().map(|t| t[b]).sum::<usize>())
        .collect();
    // unit (c, b) assignments; each cell takes at most one
    let mut bumped = vec![vec![false; nb]; rows.len()];

    let mut cells: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|c| (0..nb).map(move |b| (c, b)))
        .collect();
    cells.sort_by(|&(c1, b1), &(c2, b2)| {
        frac(c2, b2)
            .total_cmp(&frac(c1, b1))
            .then((c1, b1).cmp(&(c2, b2)))
    });
    for (c, b) in cells {
        if row_left[c] > 0 && col_left[b] > 0 && frac(c, b) > 0.0 {
            bumped[c][b] = true;
            row_left[c] -= 1;
            col_left[b] -= 1;
        }
    }
    // Repair leftovers with augmenting paths: class c → bucket b' currently
    // full, shifted along an alternating chain to a bucket with room.
    for c in 0..rows.len() {
        while row_left[c] > 0 {
            let mut seen = vec![false; nb];
            if !augment(c, &mut bumped, &mut col_left, &mut seen, rows, shares) {
                break;
            }
            row_left[c] -= 1;
        }
    }
    for (c, t) in table.iter_mut().enumerate() {
        for b in 0..nb {
            t[b] += usize::from(bumped[c][b]);
        }
    }
    table
}

fn eligible(rows: &[usize], shares: &[f64], c: usize, b: usize) -> bool {
    let x = rows[c] as f64 * shares[b];
    x - libm::floor(x + 1e-9) > 1e-9
}

fn augment(
    c: usize,
    bumped: &mut [Vec<bool>],
    col_left: &mut [usize],
    seen: &mut [bool],
    rows: &[usize],
    shares: &[f64],
) -> bool {
    let nb = col_left.len();
    for b in 0..nb {
        if seen[b] || bumped[c][b] || !eligible(rows, shares, c, b) {
            continue;
        }
        seen[b] = true;
        if col_left[b] > 0 {
            col_left[b] -= 1;
            bumped[c][b] = true;
            return true;
        }
        for other in 0..bumped.len() {
            if other == c || !bumped[other][b] {
                continue;
            }
            bumped[other][b] = false;
            if augment(other, bumped, col_left, seen, rows, shares) {
                bumped[c][b] = true;
                return true;
            }
            bumped[other][b] = true;
        }
    }
    false
}
