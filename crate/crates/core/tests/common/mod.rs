//! Brute-force reference implementations shared by the integration suites.
#![allow(dead_code)]

use amcen::{Matrix, Quadruple};

/// Counts facts `(s, r, o, k)` with `k < t` by scanning every fact.
pub fn frequency_oracle(
    facts: &[Quadruple],
    entity_count: usize,
    s: usize,
    r: usize,
    t: usize,
) -> Vec<u32> {
    let mut out = vec![0u32; entity_count];
    for q in facts {
        if q.subject == s && q.relation == r && q.time < t {
            out[q.object] += 1;
        }
    }
    out
}

/// A fact recurs when the same triple appears at a strictly earlier time (quadratic scan).
pub fn recurrence_oracle(facts: &[Quadruple], q: &Quadruple) -> bool {
    facts.iter().any(|p| {
        p.subject == q.subject
            && p.relation == q.relation
            && p.object == q.object
            && p.time < q.time
    })
}

/// `(events, new events)` per time index over base facts, by pairwise comparison.
pub fn new_event_counts(facts: &[Quadruple], time_count: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); time_count];
    for q in facts {
        out[q.time].0 += 1;
        if !recurrence_oracle(facts, q) {
            out[q.time].1 += 1;
        }
    }
    out
}

/// Double loop over anchors and positives:
/// `Σ_i mean_{p ∈ P(i)} −log(exp(v_i·v_p/τ) / Σ_{a ≠ i} exp(v_i·v_a/τ))`.
pub fn supcon_oracle(v: &[Vec<f64>], labels: &[bool], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&v[i], &v[a]) / tau).exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                sum += -((dot(&v[i], &v[p]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total
}

/// Position of `gt` after sorting by descending score, ties broken by ascending id, with the
/// `exclude` ids removed first.
pub fn rank_oracle(scores: &[f64], gt: usize, exclude: &[usize]) -> usize {
    let mut ids: Vec<usize> = (0..scores.len())
        .filter(|i| *i == gt || !exclude.contains(i))
        .collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.iter().position(|&i| i == gt).unwrap() + 1
}

/// Softmax over the support only, with zeros elsewhere.
pub fn restricted_softmax_oracle(logits: &[f64], support: &[bool]) -> Vec<f64> {
    let denom: f64 = logits
        .iter()
        .zip(support)
        .filter(|(_, &m)| m)
        .map(|(l, _)| l.exp())
        .sum();
    logits
        .iter()
        .zip(support)
        .map(|(l, &m)| if m { l.exp() / denom } else { 0.0 })
        .collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_f64(rows.len(), cols, &rows.concat()).unwrap()
}
