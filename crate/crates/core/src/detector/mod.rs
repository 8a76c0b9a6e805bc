//! The detector: residual feature extractor, dilated scale encoder, two-head
//! predictor, anchor machinery, proposal decoding and test-time filtering.

pub mod anchors;
pub mod decode;
pub mod model;
pub mod nms;

pub use anchors::{build_anchors, kmeans_anchor_lengths, AnchorSet};
pub use decode::{decode, decode_proposals, Proposal};
pub use model::{DetectionHead, DetectorConfig, DetectorModel, Extractor, ExtractorConfig, HeadOutput};
pub use nms::nms_filter;

use serde::{Deserialize, Serialize};

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub trace_id: String,
    pub c: f64,
    pub l: f64,
    pub w: crate::trace::Label,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(trace_id: &str, cand: &crate::trace::CandidateTrace) -> Self {
        Self {
            trace_id: trace_id.to_string(),
            c: cand.span.c,
            l: cand.span.l,
            w: cand.w,
            score: cand.score,
        }
    }

    pub fn candidate(&self) -> crate::trace::CandidateTrace {
        crate::trace::CandidateTrace {
            span: crate::trace::Segment::new(self.c, self.l),
            w: self.w,
            score: self.score,
        }
    }
}

/// Run [`DetectorModel::detect`] over many traces in parallel, keeping input order.
///
/// Traces without bursts yield no detections.
pub fn detect_traces<T: crate::Scalar>(
    model: &DetectorModel<T>,
    traces: &[crate::trace::MultiTabTrace],
    score_thresh: f64,
    nms_thresh: f64,
) -> crate::Result<Vec<DetectionRecord>> {
    use rayon::prelude::*;
    let per: Vec<crate::Result<Vec<DetectionRecord>>> = traces
        .par_iter()
        .map(|t| {
            if t.bursts.is_empty() {
                return Ok(Vec::new());
            }
            let found = model.detect(&t.bursts, score_thresh, nms_thresh)?;
            Ok(found.iter().map(|c| DetectionRecord::new(&t.id, c)).collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}
