use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss_logit, reg_loss_grad};
use super::matching::{match_proposals, Assignment};
use super::{global_norm, scale_params, LossConfig, TrainConfig};
use crate::detector::decode::{decode, decode_jacobian};
use crate::detector::{
    build_anchors, kmeans_anchor_lengths, AnchorSet, DetectionHead, DetectorConfig, DetectorModel, Extractor,
    HeadOutput,
};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Module, Tensor};
use crate::scalar::Scalar;
use crate::trace::{iout_unchecked, GroundTruth, MultiTabTrace, Segment};

/// Unnormalized loss terms of one trace with their gradients in head-output layout.
#[derive(Debug, Clone)]
pub struct TraceLoss<T> {
    pub cls: T,
    pub reg: T,
    pub positives: usize,
    pub dlogits: Vec<T>,
    pub doffsets: Vec<T>,
}

/// Focal and IoUT losses of one trace's head output against its ground truths.
pub fn trace_loss<T: Scalar>(
    out: &HeadOutput<T>,
    anchors: &[Segment<T>],
    gts: &[GroundTruth],
    center_scale: T,
    cfg: &LossConfig,
) -> Result<TraceLoss<T>> {
    let k = out.classes;
    if anchors.len() != out.m * out.n {
        return Err(Error::Shape(format!(
            "{} anchors for {}x{} outputs",
            anchors.len(),
            out.m,
            out.n
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.w == 0 || g.w as usize > k) {
        return Err(Error::Data(format!("ground-truth label {} outside 1..={k}", g.w)));
    }
    let spans: Vec<Segment<T>> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| decode(a, out.offsets[2 * i], out.offsets[2 * i + 1], center_scale))
        .collect();
    let matched = match_proposals(&spans, gts, cfg);

    let mut res = TraceLoss {
        cls: T::zero(),
        reg: T::zero(),
        positives: matched.num_positives(),
        dlogits: vec![T::zero(); out.logits.len()],
        doffsets: vec![T::zero(); out.offsets.len()],
    };
    for (i, a) in matched.assignment.iter().enumerate() {
        let target = match *a {
            Assignment::Ignored if cfg.class_ignore => {
                let tau = T::of(cfg.tau_neg);
                let mut skip = vec![false; k];
                for g in gts {
                    if iout_unchecked(&spans[i], &g.span.cast()) > tau {
                        skip[g.w as usize - 1] = true;
                    }
                }
                for s in (0..k).filter(|&s| !skip[s]) {
                    let (l, g) = focal_loss_logit(out.logits[i * k + s], false, cfg);
                    res.cls += l;
                    res.dlogits[i * k + s] = g;
                }
                continue;
            }
            Assignment::Ignored => continue,
            Assignment::Negative => None,
            Assignment::Positive(j) => Some(j),
        };
        let class = target.map(|j| gts[j].w as usize - 1);
        for s in 0..k {
            let (l, g) = focal_loss_logit(out.logits[i * k + s], class == Some(s), cfg);
            res.cls += l;
            res.dlogits[i * k + s] = g;
        }
        if let Some(j) = target {
            let gt: Segment<T> = gts[j].span.cast();
            let (l, dc, dl) = reg_loss_grad(&spans[i], &gt);
            let (jc, jl) = decode_jacobian(&spans[i], out.offsets[2 * i], center_scale);
            res.reg += l;
            res.doffsets[2 * i] = dc * jc;
            res.doffsets[2 * i + 1] = dl * jl;
        }
    }
    Ok(res)
}

/// Extractor features of one trace with its burst-space ground truths.
#[derive(Debug, Clone)]
pub struct FeatureSample<T> {
    pub features: Tensor<T>,
    pub gts: Vec<GroundTruth>,
}

impl<T: Scalar> FeatureSample<T> {
    pub fn new(extractor: &Extractor<T>, trace: &MultiTabTrace) -> Result<Self> {
        if trace.bursts.is_empty() {
            return Err(Error::Data(format!("trace {} has no bursts", trace.id)));
        }
        let cache = extractor.forward(&extractor.prepare_input(&trace.bursts))?;
        Ok(Self {
            features: cache.features().clone(),
            gts: trace.burst_gts()?,
        })
    }
}

/// Batch loss normalized by the batch positive count (at least one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
}

/// Loss and head gradients for a batch of cached features.
pub fn head_batch_loss<T: Scalar>(
    head: &DetectionHead<T>,
    config: &DetectorConfig,
    batch: &[&FeatureSample<T>],
    cfg: &LossConfig,
) -> Result<(BatchLoss, DetectionHead<T>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cs = T::of(config.center_scale);
    let r_ds = config.extractor.r_ds;
    let parts: Vec<Result<(TraceLoss<T>, DetectionHead<T>)>> = batch
        .par_iter()
        .map(|s| {
            let (out, cache) = head.forward(&s.features)?;
            let anchors = build_anchors(out.m, &config.anchors, r_ds);
            let tl = trace_loss(&out, &anchors, &s.gts, cs, cfg)?;
            let mut g = head.zeros_like();
            head.backward(&cache, &tl.dlogits, &tl.doffsets, &mut g)?;
            Ok((tl, g))
        })
        .collect();
    let mut grad = head.zeros_like();
    let (mut cls, mut reg, mut positives) = (0.0, 0.0, 0usize);
    for p in parts {
        let (tl, g) = p?;
        cls += tl.cls.f64();
        reg += tl.reg.f64();
        positives += tl.positives;
        grad.accumulate(&g)?;
    }
    let norm = positives.max(1) as f64;
    scale_params(&mut grad, T::of(1.0 / norm));
    let (cls, reg) = (cls / norm, reg / norm);
    Ok((
        BatchLoss {
            loss: cls + reg,
            cls,
            reg,
            positives,
        },
        grad,
    ))
}

/// Loss of `model` on raw traces, with gradients for the trainable head.
pub fn total_loss<T: Scalar>(
    model: &DetectorModel<T>,
    batch: &[&MultiTabTrace],
    cfg: &LossConfig,
) -> Result<(BatchLoss, DetectionHead<T>)> {
    let samples = batch
        .iter()
        .map(|t| FeatureSample::new(&model.extractor, t))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureSample<T>> = samples.iter().collect();
    head_batch_loss(&model.head, &model.config, &refs, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

pub fn write_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "iteration,loss,cls,reg").map_err(io)?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.iteration, r.loss, r.cls, r.reg).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Fit the scale encoder and heads on multi-tab traces with `extractor` frozen.
///
/// Anchor lengths are clustered from the training ground truths. Returns the
/// model and the per-iteration loss curve.
pub fn train_detector<T: Scalar>(
    records: &[MultiTabTrace],
    extractor: Extractor<T>,
    cfg: &TrainConfig,
) -> Result<(DetectorModel<T>, Vec<LossRecord>)> {
    cfg.validate()?;
    let records: Vec<&MultiTabTrace> = records.iter().filter(|r| !r.bursts.is_empty()).collect();
    if records.is_empty() {
        return Err(Error::Data("no non-empty training traces".into()));
    }
    let r_ds = extractor.config.r_ds;
    let shortest = records.iter().map(|r| r.bursts.len()).min().unwrap_or(0);
    if shortest < r_ds {
        warn!("shortest trace has {shortest} bursts, fewer than r_ds = {r_ds}; padding");
    }

    let samples = records
        .par_iter()
        .map(|r| FeatureSample::new(&extractor, r))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<f64> = samples.iter().flat_map(|s| s.gts.iter().map(|g| g.span.l)).collect();
    let max_label = samples
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.w))
        .max()
        .unwrap_or(0) as usize;
    let classes = cfg.classes.unwrap_or(max_label);
    if classes == 0 {
        return Err(Error::Data("training set has no monitored ground truths".into()));
    }
    if max_label > classes {
        return Err(Error::Data(format!("label {max_label} exceeds {classes} classes")));
    }
    let anchors = if lengths.is_empty() {
        AnchorSet::new(vec![r_ds as f64])?
    } else {
        let mut distinct = lengths.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let n = cfg.anchors.min(distinct.len());
        if n < cfg.anchors {
            warn!("only {n} distinct ground-truth lengths; using {n} anchors");
        }
        kmeans_anchor_lengths(&lengths, n, cfg.seed)?
    };
    info!("anchor lengths {:?}", anchors.lengths());

    let mut config = DetectorConfig::new(extractor.config.clone(), classes, anchors);
    config.center_scale = cfg.center_scale;
    if let Some(h) = cfg.head_channels {
        config.head_channels = h;
    }
    let mut model = DetectorModel::with_extractor(config, extractor, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let batch = cfg.batch.min(samples.len());
    let decay_from = cfg
        .decay_at
        .map_or(usize::MAX, |f| (f * cfg.iterations as f64).round() as usize);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut velocity = model.head.zeros_like();
    for it in 0..cfg.iterations {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<&FeatureSample<T>> = order.drain(..batch).map(|i| &samples[i]).collect();
        let (loss, grad) = head_batch_loss(&model.head, &model.config, &picked, &cfg.loss)?;
        if !loss.loss.is_finite() {
            return Err(Error::Data(format!("loss diverged at iteration {it}")));
        }
        let mut grad = grad;
        if let Some(max) = cfg.clip_norm {
            let norm = global_norm(&grad);
            if norm > max {
                scale_params(&mut grad, T::of(max / norm));
            }
        }
        let lr = if it >= decay_from { cfg.lr * 0.1 } else { cfg.lr };
        if cfg.momentum > 0.0 {
            scale_params(&mut velocity, T::of(cfg.momentum));
            velocity.accumulate(&grad)?;
            sgd_step(&mut model.head, &velocity, T::of(lr))?;
        } else {
            sgd_step(&mut model.head, &grad, T::of(lr))?;
        }
        if it % 100 == 0 || it + 1 == cfg.iterations {
            info!(
                "iter {it}: loss {:.4} (cls {:.4}, reg {:.4})",
                loss.loss, loss.cls, loss.reg
            );
        }
        log.push(LossRecord {
            iteration: it,
            loss: loss.loss,
            cls: loss.cls,
            reg: loss.reg,
        });
    }
    Ok((model, log))
}
