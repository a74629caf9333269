use crate::error::{Error, Result};

fn pairs(n: usize) -> u64 {
    (n as u64) * (n as u64).saturating_sub(1) / 2
}

/// Pairs tied within runs of equal values of an already sorted key.
fn tied_pairs<T: PartialEq>(xs: impl Iterator<Item = T>) -> u64 {
    let mut total = 0;
    let mut run = 0usize;
    let mut prev: Option<T> = None;
    for x in xs {
        if prev.as_ref() == Some(&x) {
            run += 1;
        } else {
            total += pairs(run);
            run = 1;
            prev = Some(x);
        }
    }
    total + pairs(run)
}

/// Sorts `v` by value and returns the number of inversions removed.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Final step shared by every implementation: `tau_b = s / sqrt((n0 - n1)(n0 - n2))`
/// with `s = concordant - discordant`. Returns 0 when either sequence is
/// constant.
pub fn tau_b_from_counts(s: i64, n0: u64, ties_a: u64, ties_b: u64) -> f64 {
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (s as f64 / denom).clamp(-1.0, 1.0)
    }
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("kendall tau needs at least two points"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("kendall tau of NaN"));
    }
    // Fold -0.0 into 0.0 so total_cmp agrees with ==.
    let norm =
        |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| if x == 0.0 { 0.0 } else { x }).collect() };
    let (a, b) = (norm(a), norm(b));
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let ties_a = tied_pairs(idx.iter().map(|&i| a[i]));
    let ties_ab = tied_pairs(idx.iter().map(|&i| (a[i], b[i])));
    let mut bs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut bs, &mut Vec::with_capacity(n));
    let ties_b = tied_pairs(bs.iter().copied());
    let n0 = pairs(n);
    // concordant - discordant = n0 - n1 - n2 + n3 - 2 * swaps
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + ties_ab as i64 - 2 * swaps as i64;
    Ok(tau_b_from_counts(s, n0, ties_a, ties_b))
}
