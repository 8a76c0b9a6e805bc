//! Slow, direct evaluator used to cross-check [`super::map_report`].
//!
//! Every score threshold is evaluated by re-running the matching from scratch on
//! the candidates that pass it; nothing is shared between thresholds.

use std::collections::BTreeSet;

use super::TraceEval;
use crate::trace::Label;

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `(tp, fp)` for class `w` among candidates scoring at least `tau`.
pub fn counts_at(traces: &[TraceEval], w: Label, lambda: f64, tau: f64) -> (usize, usize) {
    let mut list: Vec<(f64, usize, usize)> = Vec::new();
    for (t, tr) in traces.iter().enumerate() {
        for (i, c) in tr.candidates.iter().enumerate() {
            if c.w == w && c.score >= tau {
                list.push((c.score, t, i));
            }
        }
    }
    list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let (mut tp, mut fp) = (0, 0);
    for (_, t, i) in list {
        let c = &traces[t].candidates[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in traces[t].gts.iter().enumerate() {
            if g.w != w || used.contains(&(t, j)) {
                continue;
            }
            let v = overlap(c.span.bounds(), g.span.bounds());
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v > lambda => {
                used.insert((t, j));
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    (tp, fp)
}

/// AP of class `w` at `lambda`, or `None` without ground truths.
pub fn average_precision(traces: &[TraceEval], w: Label, lambda: f64) -> Option<f64> {
    let n_gt = traces.iter().flat_map(|t| &t.gts).filter(|g| g.w == w).count();
    if n_gt == 0 {
        return None;
    }
    let mut taus: Vec<f64> = traces
        .iter()
        .flat_map(|t| &t.candidates)
        .filter(|c| c.w == w)
        .map(|c| c.score)
        .collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let curve: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            let (tp, fp) = counts_at(traces, w, lambda, tau);
            (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let mut area = 0.0;
    let mut prev = 0.0;
    for k in 0..curve.len() {
        let p = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
        area += (curve[k].0 - prev) * p;
        prev = curve[k].0;
    }
    Some(area)
}

/// Mean AP over classes with ground truths, then over `lambdas`.
pub fn mean_average_precision(traces: &[TraceEval], lambdas: &[f64]) -> Option<(f64, Vec<f64>)> {
    let classes: BTreeSet<Label> = traces.iter().flat_map(|t| t.gts.iter().map(|g| g.w)).collect();
    if classes.is_empty() || lambdas.is_empty() {
        return None;
    }
    let per: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            classes
                .iter()
                .map(|&w| average_precision(traces, w, l).expect("class has gts"))
                .sum::<f64>()
                / classes.len() as f64
        })
        .collect();
    Some((per.iter().sum::<f64>() / per.len() as f64, per))
}
