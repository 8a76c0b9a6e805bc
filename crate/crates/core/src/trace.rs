//! Traffic units (cells, bursts), index-space segments and the IoUT overlap ratio.
//!
//! Segments are half-open `[s, e)` intervals expressed in index units of either
//! the cell sequence or the burst sequence of a trace.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Payload bytes carried by one Tor cell.
pub const CELL_BYTES: u64 = 512;

/// Website label. Monitored sites are `1..=|S|`.
pub type Label = u32;

/// Shared label of every unmonitored website.
pub const UNMONITORED: Label = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub t: f64,
    /// `+1` outgoing, `-1` incoming.
    pub d: i8,
}

impl Cell {
    pub fn new(t: f64, d: i8) -> Self {
        Self { t, d }
    }
}

/// Maximal same-direction run of cells, stored as a signed cell count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    /// Timestamp of the first cell of the run.
    pub t: f64,
    pub l: i64,
}

pub trait BurstLength {
    fn signed_len(&self) -> i64;
}

impl BurstLength for Burst {
    fn signed_len(&self) -> i64 {
        self.l
    }
}

impl BurstLength for i64 {
    fn signed_len(&self) -> i64 {
        *self
    }
}

/// Collapse maximal same-direction runs of cells into bursts.
pub fn bursts_from_cells(cells: &[Cell]) -> Result<Vec<Burst>> {
    let mut out: Vec<Burst> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        if cell.d != 1 && cell.d != -1 {
            return Err(Error::Data(format!(
                "cell {i} has direction {} (expected +1 or -1)",
                cell.d
            )));
        }
        let d = i64::from(cell.d);
        match out.last_mut() {
            Some(last) if last.l.signum() == d => last.l += d,
            _ => out.push(Burst { t: cell.t, l: d }),
        }
    }
    Ok(out)
}

/// Expand signed burst lengths back into a direction stream.
pub fn directions_from_bursts<B: BurstLength>(bursts: &[B]) -> Vec<i8> {
    let mut dirs = Vec::with_capacity(cell_count(bursts) as usize);
    for b in bursts {
        let l = b.signed_len();
        let d = if l > 0 { 1 } else { -1 };
        dirs.extend(std::iter::repeat_n(d, l.unsigned_abs() as usize));
    }
    dirs
}

pub fn cell_count<B: BurstLength>(bursts: &[B]) -> u64 {
    bursts.iter().map(|b| b.signed_len().unsigned_abs()).sum()
}

/// A span of a trace in index units, stored as center and length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment<T> {
    pub c: T,
    pub l: T,
}

impl<T: Scalar> Segment<T> {
    pub fn new(c: T, l: T) -> Self {
        Self { c, l }
    }

    pub fn from_bounds(s: T, e: T) -> Self {
        let two = T::of(2.0);
        Self {
            c: (s + e) / two,
            l: e - s,
        }
    }

    pub fn start(&self) -> T {
        self.c - self.l / T::of(2.0)
    }

    pub fn end(&self) -> T {
        self.c + self.l / T::of(2.0)
    }

    pub fn bounds(&self) -> (T, T) {
        (self.start(), self.end())
    }

    /// Length of the common part of two spans (zero when disjoint).
    pub fn intersection(&self, other: &Self) -> T {
        let lo = self.start().max(other.start());
        let hi = self.end().min(other.end());
        (hi - lo).max(T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Segment<U> {
        Segment {
            c: U::of(self.c.f64()),
            l: U::of(self.l.f64()),
        }
    }
}

/// Intersection over union of two trace segments.
pub fn iout<T: Scalar>(a: &Segment<T>, b: &Segment<T>) -> Result<T> {
    if !(a.l > T::zero()) || !(b.l > T::zero()) {
        return Err(Error::Data(format!(
            "segment lengths must be positive, got {} and {}",
            a.l, b.l
        )));
    }
    Ok(iout_unchecked(a, b))
}

/// [`iout`] without the positive-length check. Returns 0 for a degenerate union.
#[inline]
pub fn iout_unchecked<T: Scalar>(a: &Segment<T>, b: &Segment<T>) -> T {
    let inter = a.intersection(b);
    let union = a.l + b.l - inter;
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

/// Map a span over cells `[s, e)` onto the bursts that contain any of its cells.
pub fn cell_span_to_burst_span<B: BurstLength>(span_cells: &Segment<f64>, bursts: &[B]) -> Result<Segment<f64>> {
    let total = cell_count(bursts) as f64;
    let (s, e) = span_cells.bounds();
    if !(s >= 0.0 && e <= total && e > s) {
        return Err(Error::Data(format!(
            "cell span [{s}, {e}) outside trace of {total} cells"
        )));
    }
    let first_cell = s.floor() as u64;
    let last_cell = (e.ceil() as u64).saturating_sub(1);

    let mut first_burst = None;
    let mut last_burst = 0usize;
    let mut offset = 0u64;
    for (i, b) in bursts.iter().enumerate() {
        let next = offset + b.signed_len().unsigned_abs();
        if first_burst.is_none() && first_cell < next {
            first_burst = Some(i);
        }
        if last_cell < next {
            last_burst = i;
            break;
        }
        offset = next;
    }
    let first_burst = first_burst.unwrap_or(last_burst);
    Ok(Segment::from_bounds(first_burst as f64, (last_burst + 1) as f64))
}

/// A detection: span, predicted website and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub span: Segment<f64>,
    pub w: Label,
    /// Detection score in `[0, 1]`.
    pub score: f64,
}

/// Index units that ground-truth spans of a record are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexSpace {
    Cell,
    Burst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "GtRecord", into = "GtRecord")]
pub struct GroundTruth {
    pub span: Segment<f64>,
    pub w: Label,
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    s: f64,
    e: f64,
    w: Label,
}

impl From<GtRecord> for GroundTruth {
    fn from(r: GtRecord) -> Self {
        GroundTruth {
            span: Segment::from_bounds(r.s, r.e),
            w: r.w,
        }
    }
}

impl From<GroundTruth> for GtRecord {
    fn from(g: GroundTruth) -> Self {
        let (s, e) = g.span.bounds();
        GtRecord { s, e, w: g.w }
    }
}

/// One dataset record: an untrimmed burst sequence with its monitored spans.
///
/// Timestamps are not carried; the detector consumes signed burst lengths only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTabTrace {
    pub id: String,
    pub bursts: Vec<i64>,
    pub cells_total: u64,
    pub space: IndexSpace,
    pub gts: Vec<GroundTruth>,
}

impl MultiTabTrace {
    /// Check the record's structural invariants.
    pub fn validate(&self) -> Result<()> {
        if cell_count(&self.bursts) != self.cells_total {
            return Err(Error::Data(format!(
                "trace {}: cells_total {} != sum of burst lengths {}",
                self.id,
                self.cells_total,
                cell_count(&self.bursts)
            )));
        }
        if let Some(i) = self.bursts.iter().position(|&l| l == 0) {
            return Err(Error::Data(format!("trace {}: burst {i} is empty", self.id)));
        }
        if self.bursts.windows(2).any(|w| w[0].signum() == w[1].signum()) {
            return Err(Error::Data(format!(
                "trace {}: adjacent bursts share a direction",
                self.id
            )));
        }
        let limit = match self.space {
            IndexSpace::Cell => self.cells_total as f64,
            IndexSpace::Burst => self.bursts.len() as f64,
        };
        for gt in &self.gts {
            let (s, e) = gt.span.bounds();
            if !(s >= 0.0 && e <= limit && e > s) {
                return Err(Error::Data(format!(
                    "trace {}: gt [{s}, {e}) outside [0, {limit})",
                    self.id
                )));
            }
        }
        if self.gts.windows(2).any(|w| w[0].span.start() > w[1].span.start()) {
            return Err(Error::Data(format!("trace {}: gts not sorted by start", self.id)));
        }
        Ok(())
    }

    /// Ground truths expressed over burst indices, converting cell spans if needed.
    pub fn burst_gts(&self) -> Result<Vec<GroundTruth>> {
        match self.space {
            IndexSpace::Burst => Ok(self.gts.clone()),
            IndexSpace::Cell => self
                .gts
                .iter()
                .map(|g| {
                    Ok(GroundTruth {
                        span: cell_span_to_burst_span(&g.span, &self.bursts)?,
                        w: g.w,
                    })
                })
                .collect(),
        }
    }

    /// Class label of a single-tab record: its gt label, or [`UNMONITORED`].
    pub fn single_tab_label(&self) -> Label {
        self.gts.first().map_or(UNMONITORED, |g| g.w)
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MultiTabTrace>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MultiTabTrace =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a, I, R>(path: impl AsRef<Path>, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a R>,
    R: Serialize + 'a,
{
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
