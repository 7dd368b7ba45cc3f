//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use graphcal::graph::ConsistencyGraph;
use graphcal::linalg::Matrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain recursive LCS, exponential but fine for length <= 8.
pub fn lcs_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_last(), b.split_last()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs_recursive(ra, rb)
            } else {
                lcs_recursive(ra, b).max(lcs_recursive(a, rb))
            }
        }
        _ => 0,
    }
}

pub fn rouge_oracle<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let l = lcs_recursive(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Least-squares non-decreasing fit by enumerating every split of the
/// sequence into contiguous blocks and keeping the best monotone one.
pub fn isotonic_brute(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1u32 << n.saturating_sub(1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            let cut = end == n || mask & (1 << (end - 1)) != 0;
            if !cut {
                continue;
            }
            let mean = y[start..end].iter().sum::<f64>() / (end - start) as f64;
            if mean < prev - 1e-15 {
                ok = false;
                break;
            }
            prev = mean;
            fit.extend(std::iter::repeat_n(mean, end - start));
            start = end;
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-15) {
            best = Some((sse, fit));
        }
    }
    best.map(|(_, f)| f).unwrap_or_default()
}

/// ECE that scans every bin and filters its members, with bin `b` holding
/// `b <= c * B < b + 1` and the last bin also holding `c = 1`.
pub fn ece_brute(pairs: &[(f64, bool)], bins: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let members: Vec<&(f64, bool)> = pairs
            .iter()
            .filter(|(c, _)| {
                let scaled = *c * bins as f64;
                scaled >= b as f64 && (b + 1 == bins || scaled < (b + 1) as f64)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf = members.iter().map(|p| p.0).sum::<f64>() / m;
        let acc = members.iter().filter(|p| p.1).count() as f64 / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

pub fn brier_brute(pairs: &[(f64, bool)]) -> f64 {
    let mut s = 0.0;
    for &(c, y) in pairs {
        let t = if y { 1.0 } else { 0.0 };
        s += (c - t) * (c - t);
    }
    s / pairs.len() as f64
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auroc_brute(pairs: &[(f64, bool)]) -> f64 {
    let (mut good, mut total) = (0.0, 0.0);
    for p in pairs.iter().filter(|p| p.1) {
        for q in pairs.iter().filter(|q| !q.1) {
            total += 1.0;
            if p.0 > q.0 {
                good += 1.0;
            } else if p.0 == q.0 {
                good += 0.5;
            }
        }
    }
    good / total
}

/// Random valid consistency graph with `n` nodes.
pub fn random_graph(n: usize, k_max: usize, seed: u64) -> ConsistencyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = rng.random();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    let k = rng.random_range(1..=k_max.min(n));
    // assign so cluster sizes come out non-increasing: sort by drawn id frequency
    let raw: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    let mut counts = vec![0usize; k];
    raw.iter().for_each(|&a| counts[a] += 1);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let assignments = raw.iter().map(|&a| rank[a]).collect();
    let primary = rng.random_range(0..n);
    ConsistencyGraph::from_parts(w, assignments, k_max, primary).expect("valid random graph")
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
