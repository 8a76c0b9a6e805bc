use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scale_params;
use crate::detector::{Extractor, ExtractorConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, softmax_cross_entropy, Linear};
use crate::nn::{sgd_step, Module, Tensor};
use crate::scalar::Scalar;
use crate::trace::{Label, MultiTabTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Labels in classifier-output order.
    pub classes: Vec<Label>,
    /// Mean cross-entropy per epoch.
    pub loss: Vec<f64>,
    /// Training accuracy measured after each epoch.
    pub accuracy: Vec<f64>,
}

struct Sample<T> {
    input: Tensor<T>,
    target: usize,
}

fn classify<T: Scalar>(ex: &Extractor<T>, lin: &Linear<T>, s: &Sample<T>) -> Result<usize> {
    let cache = ex.forward(&s.input)?;
    let logits = lin.forward(&global_avg_pool(cache.features())?);
    Ok((0..logits.len())
        .max_by(|&a, &b| logits[a].f64().total_cmp(&logits[b].f64()))
        .unwrap_or(0))
}

/// Train the extractor with a pooled linear classifier on single-tab traces.
///
/// Every record is one class sample labelled by its ground truth, or the
/// unmonitored label when it has none. Returns the extractor only.
pub fn pretrain_extractor<T: Scalar>(
    records: &[MultiTabTrace],
    ex_cfg: ExtractorConfig,
    cfg: &PretrainConfig,
) -> Result<(Extractor<T>, PretrainReport)> {
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::Config(
            "pretraining needs a positive learning rate and batch".into(),
        ));
    }
    if let Some(r) = records.iter().find(|r| r.gts.len() > 1) {
        return Err(Error::Data(format!(
            "pretraining expects single-tab traces; {} has {} ground truths",
            r.id,
            r.gts.len()
        )));
    }
    let mut classes: Vec<Label> = records.iter().map(|r| r.single_tab_label()).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "pretraining needs at least two classes, found {}",
            classes.len()
        )));
    }

    let mut ex = Extractor::<T>::new(ex_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lin = Linear::<T>::new(ex.config.out_channels(), classes.len(), &mut rng);
    let samples: Vec<Sample<T>> = records
        .iter()
        .filter(|r| !r.bursts.is_empty())
        .map(|r| Sample {
            input: ex.prepare_input(&r.bursts),
            target: classes
                .binary_search(&r.single_tab_label())
                .expect("label collected above"),
        })
        .collect();

    let lr = T::of(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = PretrainReport {
        classes: classes.clone(),
        loss: Vec::with_capacity(cfg.epochs),
        accuracy: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let parts: Vec<Result<(T, Extractor<T>, Linear<T>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let cache = ex.forward(&s.input)?;
                    let pooled = global_avg_pool(cache.features())?;
                    let (loss, dlogits) = softmax_cross_entropy(&lin.forward(&pooled), s.target);
                    let mut gl = lin.zeros_like();
                    let dpooled = lin.backward(&pooled, &dlogits, &mut gl);
                    let dfeat = global_avg_pool_backward(cache.features().shape(), &dpooled);
                    let mut ge = ex.zeros_like();
                    ex.backward(&cache, &dfeat, &mut ge)?;
                    Ok((loss, ge, gl))
                })
                .collect();
            let mut ge = ex.zeros_like();
            let mut gl = lin.zeros_like();
            for p in parts {
                let (loss, e, l) = p?;
                epoch_loss += loss.f64();
                ge.accumulate(&e)?;
                gl.accumulate(&l)?;
            }
            let inv = T::one() / T::of_usize(batch.len());
            scale_params(&mut ge, inv);
            scale_params(&mut gl, inv);
            sgd_step(&mut ex, &ge, lr)?;
            sgd_step(&mut lin, &gl, lr)?;
        }
        let correct: Vec<Result<bool>> = samples
            .par_iter()
            .map(|s| Ok(classify(&ex, &lin, s)? == s.target))
            .collect();
        let mut hits = 0usize;
        for c in correct {
            hits += usize::from(c?);
        }
        let n = samples.len().max(1) as f64;
        let acc = hits as f64 / n;
        info!(
            "pretrain epoch {}: loss {:.4} accuracy {:.3}",
            epoch + 1,
            epoch_loss / n,
            acc
        );
        report.loss.push(epoch_loss / n);
        report.accuracy.push(acc);
    }
    Ok((ex, report))
}
