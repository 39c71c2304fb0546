use std::collections::{HashMap, HashSet};
use std::hash::Hash;

/// Kendall's tau-b of paired observations, O(n log n).
///
/// Sort by `(x, y)`, count ties, then count the inversions of the `y`
/// sequence with a bottom-up merge sort. Returns `None` when fewer than two
/// pairs are given, the slices differ in length, or one side is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let total_pairs = (n * (n - 1) / 2) as i64;
    let tied_x = tied_pair_count(&pairs, |a, b| a.0 == b.0);
    let tied_xy = tied_pair_count(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = count_inversions(&mut ys) as i64;

    // ys is now sorted, so ties in y are adjacent.
    let mut tied_y = 0i64;
    let mut run = 1i64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run += 1;
        } else {
            tied_y += run * (run - 1) / 2;
            run = 1;
        }
    }
    tied_y += run * (run - 1) / 2;

    let concordant_minus_discordant = total_pairs - tied_x - tied_y + tied_xy - 2 * swaps;
    let denom = (((total_pairs - tied_x) * (total_pairs - tied_y)) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((concordant_minus_discordant as f64 / denom).clamp(-1.0, 1.0))
}

fn tied_pair_count(sorted: &[(f64, f64)], same: impl Fn(&(f64, f64), &(f64, f64)) -> bool) -> i64 {
    let mut count = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if same(&sorted[i], &sorted[i - 1]) {
            run += 1;
        } else {
            count += run * (run - 1) / 2;
            run = 1;
        }
    }
    count + run * (run - 1) / 2
}

fn count_inversions(v: &mut [f64]) -> usize {
    let n = v.len();
    let mut buf = v.to_vec();
    let mut swaps = 0usize;
    let mut width = 1usize;
    while width < n {
        let mut start = 0usize;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if v[i] <= v[j] {
                    buf[k] = v[i];
                    i += 1;
                } else {
                    buf[k] = v[j];
                    swaps += mid - i;
                    j += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + (end - j)].copy_from_slice(&v[j..end]);
            start = end;
        }
        v.copy_from_slice(&buf);
        width *= 2;
    }
    swaps
}

/// How well `agent` orders the records it shares with `gold`, in `[0, 1]`.
///
/// Both lists are reduced to the records they have in common, keeping first
/// occurrences only. Each shared record gets its position in either list as a
/// rank, and the result is `(tau_b + 1) / 2` of those rank sequences. With at
/// most one shared record the ordering is vacuously right and the result is 1.
pub fn order_coefficient<R: Eq + Hash>(agent: &[R], gold: &[R]) -> f64 {
    let in_gold: HashSet<&R> = gold.iter().collect();
    let in_agent: HashSet<&R> = agent.iter().collect();

    let agent_order = first_occurrences(agent, &in_gold);
    if agent_order.len() <= 1 {
        return 1.0;
    }
    let gold_order = first_occurrences(gold, &in_agent);
    let gold_rank: HashMap<&R, usize> = gold_order.iter().enumerate().map(|(i, r)| (*r, i)).collect();

    let x: Vec<f64> = (0..agent_order.len()).map(|i| i as f64).collect();
    let y: Vec<f64> = agent_order.iter().map(|r| gold_rank[r] as f64).collect();
    match kendall_tau_b(&x, &y) {
        Some(tau) => ((tau + 1.0) / 2.0).clamp(0.0, 1.0),
        None => 1.0,
    }
}

fn first_occurrences<'a, R: Eq + Hash>(list: &'a [R], keep: &HashSet<&R>) -> Vec<&'a R> {
    let mut seen = HashSet::new();
    list.iter()
        .filter(|r| keep.contains(r) && seen.insert(*r))
        .collect()
}
