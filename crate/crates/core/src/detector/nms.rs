use super::decode::Proposal;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::{iout_unchecked, CandidateTrace, Label, Segment};

/// Test-time filtering: drop proposals whose best class score is below
/// `score_thresh`, then per class greedily suppress proposals overlapping a
/// higher-scoring kept one with IoUT ≥ `nms_thresh`.
///
/// Class index `k` maps to website label `k + 1`. Output is sorted by score.
pub fn nms_filter<T: Scalar>(
    proposals: &[Proposal<T>],
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<CandidateTrace>> {
    if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&nms_thresh) {
        return Err(Error::Config(format!(
            "thresholds must lie in [0, 1]: score {score_thresh}, overlap {nms_thresh}"
        )));
    }
    let mut cands: Vec<(usize, CandidateTrace)> = proposals
        .iter()
        .enumerate()
        .filter_map(|(idx, p)| {
            let (k, best) =
                p.scores.iter().enumerate().fold(
                    (0, T::neg_infinity()),
                    |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc },
                );
            let score = best.f64();
            (score >= score_thresh && p.span.l > T::zero()).then(|| {
                (
                    idx,
                    CandidateTrace {
                        span: Segment::new(p.span.c.f64(), p.span.l.f64()),
                        w: k as Label + 1,
                        score: score.clamp(0.0, 1.0),
                    },
                )
            })
        })
        .collect();
    cands.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));

    let mut kept: Vec<CandidateTrace> = Vec::new();
    for (_, c) in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.w == c.w && iout_unchecked(&k.span, &c.span) >= nms_thresh);
        if !suppressed {
            kept.push(c);
        }
    }
    Ok(kept)
}
