use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::Segment;

const KMEANS_ITERS: usize = 100;
const KMEANS_RESTARTS: usize = 8;

/// Fixed anchor lengths in burst-index units, ascending and distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AnchorSet(Vec<f64>);

impl AnchorSet {
    pub fn new(mut lengths: Vec<f64>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Config("anchor set needs at least one length".into()));
        }
        if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("anchor lengths must be positive: {lengths:?}")));
        }
        lengths.sort_by(f64::total_cmp);
        if lengths.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("anchor lengths must be distinct: {lengths:?}")));
        }
        Ok(Self(lengths))
    }

    pub fn lengths(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for AnchorSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AnchorSet> for Vec<f64> {
    fn from(a: AnchorSet) -> Self {
        a.0
    }
}

fn sse(values: &[f64], centers: &[f64]) -> f64 {
    values
        .iter()
        .map(|v| centers.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn lloyd(values: &[f64], mut centers: Vec<f64>) -> Vec<f64> {
    let k = centers.len();
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for &v in values {
            let best = (0..k)
                .min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs()))
                .expect("k >= 1");
            sums[best] += v;
            counts[best] += 1;
        }
        let next: Vec<f64> = (0..k)
            .map(|j| {
                if counts[j] > 0 {
                    sums[j] / counts[j] as f64
                } else {
                    centers[j]
                }
            })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    centers
}

/// 1D k-means (Lloyd's iterations from seeded k-means++ starts) over ground-truth lengths.
pub fn kmeans_anchor_lengths(lengths: &[f64], n: usize, seed: u64) -> Result<AnchorSet> {
    if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Data("ground-truth lengths must be positive".into()));
    }
    let mut distinct = lengths.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if n == 0 || n > distinct.len() {
        return Err(Error::Config(format!(
            "cannot form {n} anchor lengths from {} distinct values",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut centers = vec![distinct[rng.random_range(0..distinct.len())]];
        while centers.len() < n {
            let weights: Vec<f64> = distinct
                .iter()
                .map(|v| centers.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut chosen = distinct.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && pick < *w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            centers.push(distinct[chosen]);
        }
        let centers = lloyd(lengths, centers);
        let cost = sse(lengths, &centers);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, centers));
        }
    }
    let mut centers = best.expect("at least one restart").1;
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    AnchorSet::new(centers)
}

/// Center of the `i`-th cell segment (0-based) for a down-sampling rate `r_ds`.
pub fn cell_segment_center(i: usize, r_ds: usize) -> f64 {
    (i * r_ds) as f64 + r_ds as f64 / 2.0
}

/// `m × n` anchors, index `i·n + j`: cell segment `i` center, length `anchors[j]`.
pub fn build_anchors<T: Scalar>(m: usize, anchors: &AnchorSet, r_ds: usize) -> Vec<Segment<T>> {
    (0..m)
        .flat_map(|i| {
            let c = T::of(cell_segment_center(i, r_ds));
            anchors.lengths().iter().map(move |&l| Segment::new(c, T::of(l)))
        })
        .collect()
}
