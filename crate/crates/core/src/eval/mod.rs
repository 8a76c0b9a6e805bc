//! Interval-IoU average precision, mAP over a λ grid, and throughput.

pub mod reference;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::detector::DetectionRecord;
use crate::error::{Error, Result};
use crate::trace::{iout_unchecked, CandidateTrace, GroundTruth, Label, MultiTabTrace, CELL_BYTES};

/// Detections and ground truths of one trace, in the same index space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceEval {
    pub candidates: Vec<CandidateTrace>,
    pub gts: Vec<GroundTruth>,
}

/// The default λ grid: 0.50 to 0.90 in steps of 0.05.
pub fn default_lambdas() -> Vec<f64> {
    (0..=8).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    /// Score threshold of the reported precision/recall operating point.
    pub tau: f64,
    /// Classes to evaluate; defaults to every label present in the ground truths.
    pub classes: Option<Vec<Label>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            tau: 0.5,
            classes: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::Config("empty λ grid".into()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0 && l <= 1.0)) || self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "λ values must lie in (0, 1] and increase strictly: {:?}",
                self.lambdas
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("τ = {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// A class-`w` candidate with its source location, in greedy processing order.
struct Ranked {
    trace: usize,
    index: usize,
    score: f64,
}

/// Candidates of class `w` sorted by descending score; ties keep input order.
fn ranked(traces: &[TraceEval], w: Label) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = traces
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| {
            tr.candidates
                .iter()
                .enumerate()
                .filter(move |(_, c)| c.w == w)
                .map(move |(i, c)| Ranked {
                    trace: t,
                    index: i,
                    score: c.score,
                })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.trace.cmp(&b.trace))
            .then(a.index.cmp(&b.index))
    });
    out
}

/// Greedy one-to-one matching over `ranked` candidates; `true` marks a TP.
///
/// Each candidate takes the unmatched same-class ground truth of its trace with
/// the highest IoUT, and counts as a TP only if that IoUT exceeds `lambda`.
fn greedy_flags(traces: &[TraceEval], w: Label, order: &[Ranked], lambda: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = traces.iter().map(|t| vec![false; t.gts.len()]).collect();
    order
        .iter()
        .map(|r| {
            let cand = &traces[r.trace].candidates[r.index];
            let best = traces[r.trace]
                .gts
                .iter()
                .enumerate()
                .filter(|(j, g)| g.w == w && !taken[r.trace][*j])
                .map(|(j, g)| (j, iout_unchecked(&cand.span, &g.span)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v > lambda => {
                    taken[r.trace][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

fn gt_count(traces: &[TraceEval], w: Label) -> usize {
    traces.iter().flat_map(|t| &t.gts).filter(|g| g.w == w).count()
}

/// TP/FP/FN per class among candidates scoring at least `tau`.
pub fn classify_matches(traces: &[TraceEval], lambda: f64, tau: f64) -> BTreeMap<Label, Counts> {
    let labels: BTreeSet<Label> = traces
        .iter()
        .flat_map(|t| t.gts.iter().map(|g| g.w).chain(t.candidates.iter().map(|c| c.w)))
        .collect();
    labels
        .into_iter()
        .map(|w| {
            let order: Vec<Ranked> = ranked(traces, w).into_iter().take_while(|r| r.score >= tau).collect();
            let flags = greedy_flags(traces, w, &order, lambda);
            let tp = flags.iter().filter(|&&f| f).count();
            let counts = Counts {
                tp,
                fp: flags.len() - tp,
                fn_: gt_count(traces, w) - tp,
            };
            (w, counts)
        })
        .collect()
}

/// Area under the class-`w` precision/recall curve at IoUT threshold `lambda`.
///
/// The score threshold sweeps every distinct candidate score; precision is
/// interpolated as the maximum precision at any higher recall. `None` when the
/// class has no ground truths.
pub fn average_precision(traces: &[TraceEval], w: Label, lambda: f64) -> Option<f64> {
    let n_gt = gt_count(traces, w);
    if n_gt == 0 {
        return None;
    }
    let order = ranked(traces, w);
    let flags = greedy_flags(traces, w, &order, lambda);
    // One operating point per distinct score: the end of each tie group.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, (r, &f)) in order.iter().zip(&flags).enumerate() {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = order.get(k + 1).is_none_or(|next| next.score != r.score);
        if group_end {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    Some(interpolated_area(&points))
}

/// `Σ (R_k − R_{k−1}) · max_{j ≥ k} P_j` over points ordered by decreasing threshold.
pub(crate) fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut best_right = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        running = running.max(p);
        best_right[k] = running;
    }
    let mut prev_r = 0.0;
    let mut area = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        area += (r - prev_r) * best_right[k];
        prev_r = r;
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<Label>,
    pub lambdas: Vec<f64>,
    /// Per class (keyed by label), AP at each λ of the grid.
    pub ap: BTreeMap<String, Vec<f64>>,
    /// mAP at each λ of the grid.
    pub map_per_lambda: Vec<f64>,
    pub map: f64,
    pub map_50: f64,
    pub map_75: f64,
    /// Score threshold of the operating point below.
    pub tau: f64,
    /// Pooled counts at λ = 0.5 and score ≥ τ.
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mbps: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn map_at(traces: &[TraceEval], classes: &[Label], lambda: f64) -> f64 {
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&w| average_precision(traces, w, lambda))
        .collect();
    mean(&aps)
}

/// AP per class and λ, their means, and a pooled precision/recall operating point.
///
/// Classes without ground truths are left out of the means.
pub fn map_report(traces: &[TraceEval], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let present: BTreeSet<Label> = traces.iter().flat_map(|t| t.gts.iter().map(|g| g.w)).collect();
    let classes: Vec<Label> = match &cfg.classes {
        Some(c) => c.iter().copied().filter(|w| present.contains(w)).collect(),
        None => present.into_iter().collect(),
    };
    if classes.is_empty() {
        return Err(Error::Data("no ground truths of any evaluated class".into()));
    }
    let mut ap = BTreeMap::new();
    for &w in &classes {
        let row: Vec<f64> = cfg
            .lambdas
            .iter()
            .map(|&l| average_precision(traces, w, l).unwrap_or(0.0))
            .collect();
        ap.insert(w.to_string(), row);
    }
    let map_per_lambda: Vec<f64> = (0..cfg.lambdas.len())
        .map(|k| mean(&ap.values().map(|row| row[k]).collect::<Vec<_>>()))
        .collect();
    let mut counts = Counts::default();
    let keep: BTreeSet<Label> = classes.iter().copied().collect();
    for (w, c) in classify_matches(traces, 0.5, cfg.tau) {
        if keep.contains(&w) {
            counts.add(&c);
        }
    }
    Ok(EvalReport {
        map: mean(&map_per_lambda),
        map_50: map_at(traces, &classes, 0.5),
        map_75: map_at(traces, &classes, 0.75),
        classes,
        lambdas: cfg.lambdas.clone(),
        ap,
        map_per_lambda,
        tau: cfg.tau,
        precision: counts.precision(),
        recall: counts.recall(),
        counts,
        mbps: None,
    })
}

/// Group detection records under the ground-truth traces they refer to.
///
/// Ground truths are converted to burst indices, matching detector output.
pub fn pair_detections(gts: &[MultiTabTrace], detections: &[DetectionRecord]) -> Result<Vec<TraceEval>> {
    let index: HashMap<&str, usize> = gts.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut out = gts
        .iter()
        .map(|t| {
            Ok(TraceEval {
                candidates: Vec::new(),
                gts: t.burst_gts()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for d in detections {
        let i = *index
            .get(d.trace_id.as_str())
            .ok_or_else(|| Error::Data(format!("detection for unknown trace {}", d.trace_id)))?;
        out[i].candidates.push(d.candidate());
    }
    Ok(out)
}

/// Megabytes (10^6 bytes) carried by `cells` Tor cells.
pub fn cells_to_mb(cells: u64) -> f64 {
    (cells * CELL_BYTES) as f64 / 1e6
}

/// Processing rate in megabytes per second.
pub fn throughput(cells: u64, wall_seconds: f64) -> Result<f64> {
    if !(wall_seconds > 0.0 && wall_seconds.is_finite()) {
        return Err(Error::Data(format!("wall time must be positive, got {wall_seconds}")));
    }
    Ok(cells_to_mb(cells) / wall_seconds)
}
