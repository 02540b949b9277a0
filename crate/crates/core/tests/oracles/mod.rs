//! Slow, obviously-correct reference implementations of the segmentation
//! metrics, and a generator of random prediction/ground-truth pairs.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Maximal runs as `(start, end, label)`.
pub fn runs(labels: &[u16]) -> Vec<(usize, usize, u16)> {
    let mut out: Vec<(usize, usize, u16)> = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push((start, t, labels[start]));
            start = t;
        }
    }
    out
}

fn overlap(a: (usize, usize, u16), b: (usize, usize, u16)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = hi.saturating_sub(lo) as f64;
    let union = (a.1 - a.0 + b.1 - b.0) as f64 - inter;
    inter / union
}

fn f1_from(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    if n_pred + n_gt == 0 {
        return 100.0;
    }
    200.0 * tp as f64 / (n_pred + n_gt) as f64
}

/// Greedy matcher written independently: predicted segments in order, each
/// claims its best same-label ground-truth segment (earliest on ties) if that
/// segment is still free and overlaps by at least `tau`.
pub fn greedy_f1(pred: &[u16], gt: &[u16], tau: f64) -> f64 {
    let (p, g) = (runs(pred), runs(gt));
    let mut used = vec![false; g.len()];
    let mut tp = 0;
    for &ps in &p {
        let mut best_j = usize::MAX;
        let mut best = -1.0;
        for (j, &gs) in g.iter().enumerate() {
            if gs.2 == ps.2 && overlap(ps, gs) > best {
                best = overlap(ps, gs);
                best_j = j;
            }
        }
        if best_j != usize::MAX && best >= tau && !used[best_j] {
            used[best_j] = true;
            tp += 1;
        }
    }
    f1_from(tp, p.len(), g.len())
}

/// F1 under a maximum-cardinality matching of predicted to ground-truth
/// segments, restricted to equal labels and overlap at least `tau`.
pub fn optimal_f1(pred: &[u16], gt: &[u16], tau: f64) -> f64 {
    let (p, g) = (runs(pred), runs(gt));
    let edges: Vec<Vec<usize>> = p
        .iter()
        .map(|&ps| (0..g.len()).filter(|&j| g[j].2 == ps.2 && overlap(ps, g[j]) >= tau).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; g.len()];
    fn augment(i: usize, edges: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &j in &edges[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, edges, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut tp = 0;
    for i in 0..p.len() {
        let mut seen = vec![false; g.len()];
        if augment(i, &edges, &mut owner, &mut seen) {
            tp += 1;
        }
    }
    f1_from(tp, p.len(), g.len())
}

/// Edit score from the full quadratic edit-distance table.
pub fn edit_score(pred: &[u16], gt: &[u16]) -> f64 {
    let p: Vec<u16> = runs(pred).into_iter().map(|r| r.2).collect();
    let g: Vec<u16> = runs(gt).into_iter().map(|r| r.2).collect();
    let (n, m) = (p.len(), g.len());
    if n.max(m) == 0 {
        return 100.0;
    }
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(p[i - 1] != g[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    100.0 * (1.0 - d[n][m] as f64 / n.max(m) as f64)
}

fn random_labels(rng: &mut ChaCha8Rng, frames: usize, classes: u16) -> Vec<u16> {
    let mut out = Vec::with_capacity(frames);
    while out.len() < frames {
        let label = rng.random_range(0..classes);
        let len = rng.random_range(1..=8).min(frames - out.len());
        out.extend(std::iter::repeat_n(label, len));
    }
    out
}

/// A ground-truth sequence (`T ≤ 40`, `C ≤ 5`) and a prediction that is
/// either unrelated or a corrupted copy of it, as a segmentation model
/// would produce.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<u16>, Vec<u16>) {
    let frames = rng.random_range(0..=40);
    let classes = rng.random_range(1..=5u16);
    let gt = random_labels(rng, frames, classes);
    let pred = if frames == 0 || rng.random_bool(0.3) {
        random_labels(rng, frames, classes)
    } else {
        let mut pred = gt.clone();
        for _ in 0..rng.random_range(0..4) {
            let t = rng.random_range(0..frames);
            let len = rng.random_range(1..=4).min(frames - t);
            let label = rng.random_range(0..classes);
            pred[t..t + len].fill(label);
        }
        pred
    };
    (pred, gt)
}
