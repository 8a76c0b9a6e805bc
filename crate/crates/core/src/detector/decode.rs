use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::scalar::Scalar;
use crate::trace::Segment;

/// A decoded anchor: its span plus the class scores of the anchor it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    pub span: Segment<T>,
    pub scores: Vec<T>,
    /// Cell segment index.
    pub cell: usize,
    /// Anchor index within the cell segment.
    pub anchor: usize,
}

/// `c = center_scale · σ(d_c) + c_anchor`, `l = l_anchor · e^{d_l}`.
#[inline]
pub fn decode<T: Scalar>(anchor: &Segment<T>, d_c: T, d_l: T, center_scale: T) -> Segment<T> {
    Segment::new(center_scale * sigmoid(d_c) + anchor.c, anchor.l * d_l.exp())
}

/// Partial derivatives `(∂c/∂d_c, ∂l/∂d_l)` of [`decode`] at the decoded segment.
#[inline]
pub fn decode_jacobian<T: Scalar>(decoded: &Segment<T>, d_c: T, center_scale: T) -> (T, T) {
    let s = sigmoid(d_c);
    (center_scale * s * (T::one() - s), decoded.l)
}

/// One proposal per anchor. `offsets` is `[m·n][2]`, `scores` is `[m·n][classes]`.
pub fn decode_proposals<T: Scalar>(
    anchors: &[Segment<T>],
    offsets: &[T],
    scores: &[T],
    classes: usize,
    center_scale: T,
) -> Result<Vec<Proposal<T>>> {
    if offsets.len() != anchors.len() * 2 || scores.len() != anchors.len() * classes {
        return Err(Error::Shape(format!(
            "{} anchors vs {} offsets and {} scores ({classes} classes)",
            anchors.len(),
            offsets.len(),
            scores.len()
        )));
    }
    let n = if anchors.is_empty() {
        1
    } else {
        anchors.iter().take_while(|a| a.c == anchors[0].c).count()
    };
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(k, a)| Proposal {
            span: decode(a, offsets[2 * k], offsets[2 * k + 1], center_scale),
            scores: scores[k * classes..(k + 1) * classes].to_vec(),
            cell: k / n,
            anchor: k % n,
        })
        .collect())
}
