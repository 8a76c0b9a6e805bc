//! Seeded procedural traffic: single-tab page loads and overlapping multi-tab compositions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{
    bursts_from_cells, cell_count, cell_span_to_burst_span, Cell, GroundTruth, IndexSpace, Label, MultiTabTrace,
    Segment, UNMONITORED,
};

/// Number of positions in a signature's burst-length profile.
pub const PROFILE_LEN: usize = 24;

/// Maximum timestamp jitter added to unit-step cell times. Kept below 0.25 so
/// that offsets between two traces never reorder cells by more than one step.
const JITTER: f64 = 0.2;

/// Size of the pool unmonitored traces draw their signatures from.
const UNMONITORED_POOL: u64 = 100_000;

/// Procedural stand-in for one website's traffic shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteSignature {
    pub w: Label,
    /// Mean |burst length| at each profile position.
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub direction_seed: u64,
    pub len_min: usize,
    pub len_max: usize,
}

impl WebsiteSignature {
    /// Direction of the first burst.
    pub fn first_direction(&self) -> i8 {
        if self.direction_seed & 1 == 0 {
            1
        } else {
            -1
        }
    }
}

/// Deterministic universe of website signatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignatureBank {
    pub world_seed: u64,
    /// Scale of class-specific deviation from the shared base profile.
    pub separation: f64,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for SignatureBank {
    fn default() -> Self {
        Self {
            world_seed: 0,
            separation: 1.0,
            len_min: 320,
            len_max: 480,
        }
    }
}

impl SignatureBank {
    pub fn monitored(&self, w: Label) -> WebsiteSignature {
        self.build(w, u64::from(w))
    }

    pub fn unmonitored(&self, index: u64) -> WebsiteSignature {
        self.build(UNMONITORED, (1 << 32) + index)
    }

    fn build(&self, w: Label, stream: u64) -> WebsiteSignature {
        let mut rng = ChaCha8Rng::seed_from_u64(self.world_seed);
        rng.set_stream(stream);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let direction_seed: u64 = rng.random();
        let class_scale = (0.3 * self.separation * std.sample(&mut rng)).exp();
        let mut means = Vec::with_capacity(PROFILE_LEN);
        let mut sigmas = Vec::with_capacity(PROFILE_LEN);
        for k in 0..PROFILE_LEN {
            // Even positions follow the first direction; requests are short, responses long.
            let base = if k % 2 == 0 { 2.5 } else { 12.0 };
            let m = base * class_scale * (0.7 * self.separation * std.sample(&mut rng)).exp();
            means.push(m.max(1.0));
            sigmas.push(0.2 * m.max(1.0));
        }
        WebsiteSignature {
            w,
            means,
            sigmas,
            direction_seed,
            len_min: self.len_min,
            len_max: self.len_max,
        }
    }
}

/// Generate one page load for `sig`. Timestamps are unit steps with small jitter.
pub fn gen_single_tab(sig: &WebsiteSignature, seed: u64) -> Result<(Vec<Cell>, Label)> {
    if sig.len_min == 0 || sig.len_min > sig.len_max {
        return Err(Error::Config(format!(
            "invalid length range [{}, {}]",
            sig.len_min, sig.len_max
        )));
    }
    if sig.means.is_empty() || sig.means.len() != sig.sigmas.len() {
        return Err(Error::Config("signature profile is empty or ragged".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(sig.len_min..=sig.len_max);
    let mut cells = Vec::with_capacity(n);
    let mut d = sig.first_direction();
    let mut pos = 0usize;
    while cells.len() < n {
        let k = pos % sig.means.len();
        let mag = Normal::new(sig.means[k], sig.sigmas[k])
            .map_err(|e| Error::Config(format!("bad profile at {k}: {e}")))?
            .sample(&mut rng)
            .round()
            .max(1.0) as usize;
        for _ in 0..mag.min(n - cells.len()) {
            let t = cells.len() as f64 + rng.random_range(0.0..JITTER);
            cells.push(Cell::new(t, d));
        }
        d = -d;
        pos += 1;
    }
    Ok((cells, sig.w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPosition {
    /// The next trace starts inside the earlier trace's tail.
    Tail,
    /// The next trace ends inside the earlier trace's front.
    Front,
    /// The next trace wraps the earlier one, overlapping both of its ends.
    Both,
}

impl OverlapPosition {
    pub const ALL: [OverlapPosition; 3] = [Self::Tail, Self::Front, Self::Both];
}

impl fmt::Display for OverlapPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tail => "tail",
            Self::Front => "front",
            Self::Both => "both",
        })
    }
}

/// Overlapping fractions used by the strict protocol: 0.1 to 0.6 in steps of 0.1.
pub const OVERLAP_FRACTIONS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSpec {
    pub position: OverlapPosition,
    pub p: f64,
}

impl OverlapSpec {
    /// All 18 position × fraction combinations.
    pub fn all() -> Vec<OverlapSpec> {
        OverlapPosition::ALL
            .iter()
            .flat_map(|&position| OVERLAP_FRACTIONS.iter().map(move |&p| OverlapSpec { position, p }))
            .collect()
    }

    pub fn validate(&self, free_overlap: bool) -> Result<()> {
        let ok = if free_overlap {
            (0.0..=1.0).contains(&self.p)
        } else {
            OVERLAP_FRACTIONS.iter().any(|f| (f - self.p).abs() < 1e-9)
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "overlap fraction {} not allowed{}",
                self.p,
                if free_overlap {
                    ""
                } else {
                    " (expected 0.1..0.6 step 0.1)"
                }
            )))
        }
    }

    /// Stable key such as `tail-0.3`.
    pub fn key(&self) -> String {
        format!("{}-{:.1}", self.position, self.p)
    }

    /// Cells of the later trace that overlap an earlier trace of `earlier_len` cells.
    pub fn overlap_cells(&self, earlier_len: usize) -> usize {
        (self.p * earlier_len as f64).round() as usize
    }
}

/// Result of merging several single-tab traces.
#[derive(Debug, Clone)]
pub struct Composed {
    /// Burst-space record.
    pub record: MultiTabTrace,
    /// Ground truths in merged cell indices.
    pub cell_gts: Vec<GroundTruth>,
    /// Merged cell stream.
    pub merged: Vec<Cell>,
    /// Input trace index of every merged cell.
    pub owner: Vec<usize>,
}

fn span_of(cells: &[Cell]) -> (f64, f64) {
    (cells[0].t, cells[cells.len() - 1].t)
}

/// Shift `later` so it overlaps `earlier` (already placed) as described by `spec`.
fn place(earlier: &[Cell], later: &[Cell], spec: &OverlapSpec) -> Result<Vec<Cell>> {
    let n = earlier.len();
    let o = spec.overlap_cells(n);
    if o > later.len() {
        return Err(Error::Data(format!(
            "overlap of {o} cells exceeds later trace length {}",
            later.len()
        )));
    }
    // Shift `cells` so that cell `k` sits exactly at time `at`.
    let pinned = |cells: &[Cell], k: usize, at: f64| -> Vec<Cell> {
        let delta = at - cells[k].t;
        let mut out: Vec<Cell> = cells.iter().map(|c| Cell::new(c.t + delta, c.d)).collect();
        out[k].t = at;
        out
    };
    let (a0, a1) = span_of(earlier);
    // Each overlapping part is pinned by its outermost overlapping cell, which
    // lands exactly on the earlier trace's first or last timestamp; jitter then
    // cannot push it outside the earlier span.
    let placed = match spec.position {
        OverlapPosition::Tail if o == 0 => pinned(later, 0, a1 + 1.0),
        OverlapPosition::Tail => pinned(later, o - 1, a1),
        OverlapPosition::Front if o == 0 => pinned(later, later.len() - 1, a0 - 1.0),
        OverlapPosition::Front => pinned(later, later.len() - o, a0),
        OverlapPosition::Both => {
            let front = o / 2;
            let tail = o - front;
            let split = (later.len() - o) / 2 + front;
            let (head, rest) = later.split_at(split);
            let mut out = Vec::with_capacity(later.len());
            if !head.is_empty() {
                out.extend(if front == 0 {
                    pinned(head, head.len() - 1, a0 - 1.0)
                } else {
                    pinned(head, head.len() - front, a0)
                });
            }
            if !rest.is_empty() {
                out.extend(if tail == 0 {
                    pinned(rest, 0, a1 + 1.0)
                } else {
                    pinned(rest, tail - 1, a1)
                });
            }
            out
        }
    };
    Ok(placed)
}

/// Merge single-tab traces into one multi-tab trace.
///
/// Trace `i + 1` is positioned against trace `i` by `specs[i]`. Cells are merged by
/// timestamp with ties going to the earlier trace. Ground truths cover each
/// monitored trace from its first to its last merged cell and are remapped to
/// burst indices of the merged stream.
pub fn compose_multitab(
    id: impl Into<String>,
    traces: &[(Vec<Cell>, Label)],
    specs: &[OverlapSpec],
    free_overlap: bool,
) -> Result<Composed> {
    if traces.is_empty() {
        return Err(Error::Data("no traces to compose".into()));
    }
    if specs.len() + 1 != traces.len() {
        return Err(Error::Config(format!(
            "{} traces need {} overlap specs, got {}",
            traces.len(),
            traces.len() - 1,
            specs.len()
        )));
    }
    if let Some(i) = traces.iter().position(|(c, _)| c.is_empty()) {
        return Err(Error::Data(format!("trace {i} is empty")));
    }
    for spec in specs {
        spec.validate(free_overlap)?;
    }

    let mut placed: Vec<Vec<Cell>> = Vec::with_capacity(traces.len());
    placed.push(traces[0].0.clone());
    for (i, spec) in specs.iter().enumerate() {
        let next = place(&placed[i], &traces[i + 1].0, spec)?;
        placed.push(next);
    }

    let mut order: Vec<(f64, usize, usize)> = placed
        .iter()
        .enumerate()
        .flat_map(|(k, cells)| cells.iter().enumerate().map(move |(j, c)| (c.t, k, j)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let merged: Vec<Cell> = order.iter().map(|&(_, k, j)| placed[k][j]).collect();
    let owner: Vec<usize> = order.iter().map(|&(_, k, _)| k).collect();
    let bursts = bursts_from_cells(&merged)?;

    let mut first = vec![usize::MAX; traces.len()];
    let mut last = vec![0usize; traces.len()];
    for (idx, &k) in owner.iter().enumerate() {
        first[k] = first[k].min(idx);
        last[k] = idx;
    }
    let mut cell_gts = Vec::new();
    let mut gts = Vec::new();
    for (k, (_, w)) in traces.iter().enumerate() {
        if *w == UNMONITORED {
            continue;
        }
        let span = Segment::from_bounds(first[k] as f64, (last[k] + 1) as f64);
        cell_gts.push(GroundTruth { span, w: *w });
        gts.push(GroundTruth {
            span: cell_span_to_burst_span(&span, &bursts)?,
            w: *w,
        });
    }
    let by_start = |a: &GroundTruth, b: &GroundTruth| {
        a.span
            .start()
            .total_cmp(&b.span.start())
            .then(a.span.end().total_cmp(&b.span.end()))
    };
    cell_gts.sort_by(by_start);
    gts.sort_by(by_start);

    let record = MultiTabTrace {
        id: id.into(),
        cells_total: cell_count(&bursts),
        bursts: bursts.iter().map(|b| b.l).collect(),
        space: IndexSpace::Burst,
        gts,
    };
    Ok(Composed {
        record,
        cell_gts,
        merged,
        owner,
    })
}

/// Number of merged cells of trace `later` whose timestamps fall within the time span of trace `earlier`.
pub fn realized_overlap(composed: &Composed, earlier: usize, later: usize) -> usize {
    let times = |k: usize| {
        composed
            .merged
            .iter()
            .zip(&composed.owner)
            .filter(move |(_, &o)| o == k)
            .map(|(c, _)| c.t)
    };
    let lo = times(earlier).fold(f64::INFINITY, f64::min);
    let hi = times(earlier).fold(f64::NEG_INFINITY, f64::max);
    times(later).filter(|&t| t >= lo && t <= hi).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of monitored classes |S|.
    pub classes: u32,
    /// Unmonitored visits per monitored visit.
    pub base_rate: f64,
    /// Single-tab traces per multi-tab trace.
    pub tabs: usize,
    /// Multi-tab traces in the training split.
    pub count: usize,
    /// Multi-tab traces in the test split.
    pub test_count: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub bank: SignatureBank,
    pub free_overlap: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            base_rate: 10.0,
            tabs: 2,
            count: 100,
            test_count: 100,
            seed: 0,
            bank: SignatureBank::default(),
            free_overlap: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("need at least one monitored class".into()));
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Config(format!("base rate {} must be >= 0", self.base_rate)));
        }
        if self.tabs == 0 {
            return Err(Error::Config("tab count must be >= 1".into()));
        }
        let b = &self.bank;
        if b.len_min == 0 || b.len_min > b.len_max {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}]",
                b.len_min, b.len_max
            )));
        }
        let max_p = OVERLAP_FRACTIONS[OVERLAP_FRACTIONS.len() - 1];
        if self.tabs > 1 && (max_p * b.len_max as f64).round() as usize > b.len_min {
            return Err(Error::Config(format!(
                "length range [{}, {}] too wide: a {max_p} overlap of the longest trace exceeds the shortest",
                b.len_min, b.len_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub traces: usize,
    pub singles: usize,
    pub monitored: usize,
    pub unmonitored: usize,
    pub overlap_types: BTreeMap<String, usize>,
    pub class_histogram: BTreeMap<String, usize>,
    pub mean_cells: f64,
    pub mean_bursts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub train: SplitStats,
    pub test: SplitStats,
}

/// One generated split: records plus the overlap specs used for each.
#[derive(Debug, Clone)]
pub struct Split {
    pub records: Vec<MultiTabTrace>,
    pub specs: Vec<Vec<OverlapSpec>>,
    pub stats: SplitStats,
}

fn split_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 40) | index);
    rng
}

/// Generate one split in memory. `split` selects an independent RNG family.
pub fn gen_split(cfg: &SynthConfig, split: u64, count: usize) -> Result<Split> {
    cfg.validate()?;
    let prefix = if split == 0 { "train" } else { "test" };
    let singles = count * cfg.tabs;
    let monitored = (singles as f64 / (1.0 + cfg.base_rate)).round() as usize;
    let mut labels: Vec<Label> = (0..singles)
        .map(|i| {
            if i < monitored {
                (i as u32 % cfg.classes) + 1
            } else {
                UNMONITORED
            }
        })
        .collect();
    labels.shuffle(&mut split_rng(cfg.seed, split, u64::from(u32::MAX)));

    let all_specs = OverlapSpec::all();
    let generated: Vec<Result<(MultiTabTrace, Vec<OverlapSpec>)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = split_rng(cfg.seed, split, i as u64);
            let mut singles = Vec::with_capacity(cfg.tabs);
            for &w in &labels[i * cfg.tabs..(i + 1) * cfg.tabs] {
                let sig = if w == UNMONITORED {
                    cfg.bank.unmonitored(rng.random_range(0..UNMONITORED_POOL))
                } else {
                    cfg.bank.monitored(w)
                };
                singles.push(gen_single_tab(&sig, rng.random())?);
            }
            let specs: Vec<OverlapSpec> = (1..cfg.tabs)
                .map(|_| all_specs[rng.random_range(0..all_specs.len())])
                .collect();
            let composed = compose_multitab(format!("{prefix}-{i:06}"), &singles, &specs, cfg.free_overlap)?;
            Ok((composed.record, specs))
        })
        .collect();

    let mut records = Vec::with_capacity(count);
    let mut specs = Vec::with_capacity(count);
    for g in generated {
        let (r, s) = g?;
        records.push(r);
        specs.push(s);
    }

    let mut stats = SplitStats {
        traces: count,
        singles,
        monitored,
        unmonitored: singles - monitored,
        ..Default::default()
    };
    for s in specs.iter().flatten() {
        *stats.overlap_types.entry(s.key()).or_default() += 1;
    }
    for &w in &labels {
        *stats.class_histogram.entry(w.to_string()).or_default() += 1;
    }
    if count > 0 {
        stats.mean_cells = records.iter().map(|r| r.cells_total as f64).sum::<f64>() / count as f64;
        stats.mean_bursts = records.iter().map(|r| r.bursts.len() as f64).sum::<f64>() / count as f64;
    }
    Ok(Split { records, specs, stats })
}

/// Write `train.jsonl`, `test.jsonl` and `manifest.json` into `out`.
pub fn gen_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train = gen_split(cfg, 0, cfg.count)?;
    let test = gen_split(cfg, 1, cfg.test_count)?;
    crate::trace::write_jsonl(out.join("train.jsonl"), &train.records)?;
    crate::trace::write_jsonl(out.join("test.jsonl"), &test.records)?;
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.clone(),
        train: train.stats,
        test: test.stats,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
