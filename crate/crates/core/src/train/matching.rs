use crate::scalar::Scalar;
use crate::trace::{iout_unchecked, GroundTruth, Segment};

use super::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Positive for the ground truth at this index.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per proposal.
    pub assignment: Vec<Assignment>,
    /// Per ground truth, the proposals assigned to it as positives.
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<usize>,
    pub ignored: Vec<usize>,
    /// Per proposal, IoUT with its assigned ground truth (0 when not positive).
    pub iou: Vec<f64>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// Split decoded proposals into positives, negatives and ignored ones.
///
/// For every ground truth, the `k` proposals whose centers are nearest (L1) among
/// those overlapping it are candidates; candidates with IoUT below `tau_pos` are
/// discarded. A proposal claimed by several ground truths goes to the one it
/// overlaps most. Remaining proposals are negatives when their best IoUT is at
/// most `tau_neg` and ignored otherwise.
pub fn match_proposals<T: Scalar>(proposals: &[Segment<T>], gts: &[GroundTruth], cfg: &LossConfig) -> MatchResult {
    let spans: Vec<Segment<f64>> = proposals.iter().map(|p| p.cast()).collect();
    let n = spans.len();
    let ious: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| spans.iter().map(|p| iout_unchecked(p, &g.span)).collect())
        .collect();

    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for (j, g) in gts.iter().enumerate() {
        let mut cands: Vec<usize> = (0..n).filter(|&i| ious[j][i] > 0.0).collect();
        cands.sort_by(|&a, &b| {
            (spans[a].c - g.span.c)
                .abs()
                .total_cmp(&(spans[b].c - g.span.c).abs())
                .then(a.cmp(&b))
        });
        for &i in cands.iter().take(cfg.k) {
            let iou = ious[j][i];
            if iou >= cfg.tau_pos && best[i].is_none_or(|(_, b)| iou > b) {
                best[i] = Some((j, iou));
            }
        }
    }

    let mut result = MatchResult {
        assignment: Vec::with_capacity(n),
        positives: vec![Vec::new(); gts.len()],
        negatives: Vec::new(),
        ignored: Vec::new(),
        iou: vec![0.0; n],
    };
    for i in 0..n {
        let a = match best[i] {
            Some((j, iou)) => {
                result.positives[j].push(i);
                result.iou[i] = iou;
                Assignment::Positive(j)
            }
            None => {
                let max_iou = ious.iter().map(|row| row[i]).fold(0.0, f64::max);
                if max_iou <= cfg.tau_neg {
                    result.negatives.push(i);
                    Assignment::Negative
                } else {
                    result.ignored.push(i);
                    Assignment::Ignored
                }
            }
        };
        result.assignment.push(a);
    }
    result
}
