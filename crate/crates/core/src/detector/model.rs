use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{build_anchors, AnchorSet};
use super::decode::decode_proposals;
use super::nms::nms_filter;
use crate::error::{Error, Result};
use crate::nn::blocks::{BasicCache, DilatedCache};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{relu, relu_backward};
use crate::nn::{prefixed, prefixed_mut, sigmoid, BasicBlock, Conv1d, DilatedBlock, Module, Tensor};
use crate::scalar::Scalar;
use crate::trace::{CandidateTrace, Segment};

/// Number of residual stages in the extractor; each may halve the resolution.
pub const STAGES: usize = 4;
/// Basic blocks per stage, as in an 18-layer ResNet.
pub const BLOCKS_PER_STAGE: usize = 2;
/// Prior probability used to initialise classification logits.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Channels of the first stage; later stages use 2×, 3×, 4×.
    pub width: usize,
    /// Temporal down-sampling rate, a power of two up to 16.
    pub r_ds: usize,
    /// Signed burst lengths are divided by this before entering the network.
    pub input_scale: f64,
    /// Normalized inputs are clamped to `[-input_clamp, input_clamp]`.
    pub input_clamp: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            width: 16,
            r_ds: 16,
            input_scale: 50.0,
            input_clamp: 20.0,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("extractor width must be positive".into()));
        }
        if !self.r_ds.is_power_of_two() || self.r_ds > 1 << STAGES {
            return Err(Error::Config(format!(
                "down-sampling rate {} must be a power of two <= {}",
                self.r_ds,
                1 << STAGES
            )));
        }
        if !(self.input_scale > 0.0 && self.input_clamp > 0.0) {
            return Err(Error::Config("input scale and clamp must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        STAGES * self.width
    }

    /// Padded input length for a sequence of `len` bursts.
    pub fn padded_len(&self, len: usize) -> usize {
        len.div_ceil(self.r_ds).max(1) * self.r_ds
    }
}

/// 1D residual feature extractor: stem convolution plus four stages of basic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor<T> {
    pub config: ExtractorConfig,
    pub stem: Conv1d<T>,
    pub blocks: Vec<BasicBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct ExtractorCache<T> {
    x: Tensor<T>,
    stem: Tensor<T>,
    blocks: Vec<BasicCache<T>>,
    features: Tensor<T>,
}

impl<T> ExtractorCache<T> {
    /// `[channels, m]` feature sequence.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

impl<T: Scalar> Extractor<T> {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let downs = config.r_ds.trailing_zeros() as usize;
        let stem = Conv1d::same(1, w, 7, 1, 1, &mut rng);
        let mut blocks = Vec::with_capacity(STAGES * BLOCKS_PER_STAGE);
        let mut cin = w;
        for stage in 0..STAGES {
            let cout = (stage + 1) * w;
            let stride = if stage >= STAGES - downs { 2 } else { 1 };
            for b in 0..BLOCKS_PER_STAGE {
                let s = if b == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(cin, cout, s, &mut rng));
                cin = cout;
            }
        }
        Ok(Self { config, stem, blocks })
    }

    /// Normalized, zero-padded `[1, 1, L]` input for a signed burst sequence.
    pub fn prepare_input(&self, bursts: &[i64]) -> Tensor<T> {
        let cfg = &self.config;
        let len = cfg.padded_len(bursts.len());
        let mut data = vec![T::zero(); len];
        for (v, &b) in data.iter_mut().zip(bursts) {
            let x = (b as f64 / cfg.input_scale).clamp(-cfg.input_clamp, cfg.input_clamp);
            *v = T::of(x);
        }
        Tensor::from_vec(&[1, 1, len], data).expect("input shape")
    }

    /// Number of feature positions for an input of length `len`: `⌊len / r_ds⌋`.
    pub fn feature_len(&self, len: usize) -> usize {
        len / self.config.r_ds
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ExtractorCache<T>> {
        let (b, c, len) = x.dims3()?;
        if b != 1 || c != 1 {
            return Err(Error::Shape(format!(
                "extractor expects [1, 1, L], got {:?}",
                x.shape()
            )));
        }
        let m = self.feature_len(len);
        if m == 0 {
            return Err(Error::Data(format!(
                "input of {len} positions is shorter than the down-sampling rate {}",
                self.config.r_ds
            )));
        }
        let stem = relu(&self.stem.forward(x)?);
        let mut caches: Vec<BasicCache<T>> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = caches.last().map_or(&stem, |c| c.output());
            caches.push(block.forward(input)?);
        }
        let full = caches.last().map_or(&stem, |c| c.output());
        let (_, ch, lo) = full.dims3()?;
        let mut feat = Vec::with_capacity(ch * m);
        for row in full.data().chunks(lo) {
            feat.extend_from_slice(&row[..m]);
        }
        Ok(ExtractorCache {
            x: x.clone(),
            features: Tensor::from_vec(&[ch, m], feat)?,
            stem,
            blocks: caches,
        })
    }

    /// Accumulate parameter gradients for `∂L/∂features`.
    pub fn backward(&self, cache: &ExtractorCache<T>, dfeat: &Tensor<T>, grad: &mut Self) -> Result<()> {
        let full_shape = cache
            .blocks
            .last()
            .map_or(cache.stem.shape(), |c| c.output().shape())
            .to_vec();
        let lo = full_shape[full_shape.len() - 1];
        let (_, ch, m) = dfeat.dims3()?;
        let mut padded = vec![T::zero(); ch * lo];
        for (dst, src) in padded.chunks_mut(lo).zip(dfeat.data().chunks(m)) {
            dst[..m].copy_from_slice(src);
        }
        let mut dy = Tensor::from_vec(&full_shape, padded)?;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dy = block.backward(&cache.blocks[i], &dy, &mut grad.blocks[i])?;
        }
        let dstem = relu_backward(&cache.stem, &dy);
        self.stem.backward(&cache.x, &dstem, &mut grad.stem)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new(&self.config)?;
        ck.insert_module("extractor", self);
        ck.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ExtractorConfig = ck.config()?;
        let mut ex = Self::new(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.load_module("extractor", &mut ex)?;
        Ok(ex)
    }
}

impl<T: Scalar> Module<T> for Extractor<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = prefixed("stem", self.stem.params()).collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<_> = prefixed_mut("stem", self.stem.params_mut()).collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("blocks.{i}"), b.params_mut()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub extractor: ExtractorConfig,
    /// Number of monitored websites |S|.
    pub classes: usize,
    /// Dilation rates of the scale encoder blocks.
    pub rates: Vec<usize>,
    /// Channel reduction factor inside a dilation block.
    pub reduction: usize,
    pub head_channels: usize,
    /// Multiplier on the sigmoid center offset.
    pub center_scale: f64,
    pub anchors: AnchorSet,
}

impl DetectorConfig {
    pub fn new(extractor: ExtractorConfig, classes: usize, anchors: AnchorSet) -> Self {
        Self {
            head_channels: extractor.out_channels(),
            extractor,
            classes,
            rates: vec![2, 4, 6, 8],
            reduction: 4,
            center_scale: 1.0,
            anchors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        if self.rates.contains(&0) || self.reduction == 0 || self.head_channels == 0 {
            return Err(Error::Config(
                "dilation rates, reduction and head width must be positive".into(),
            ));
        }
        if !(self.center_scale > 0.0) {
            return Err(Error::Config("center scale must be positive".into()));
        }
        Ok(())
    }
}

/// Raw head outputs for one trace, laid out `[m][n][classes]` and `[m][n][2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub m: usize,
    pub n: usize,
    pub classes: usize,
    pub logits: Vec<T>,
    /// `(d_c, d_l)` per anchor.
    pub offsets: Vec<T>,
}

impl<T: Scalar> HeadOutput<T> {
    /// Sigmoid class scores, `[m][n][classes]`.
    pub fn scores(&self) -> Vec<T> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Scale encoder followed by the two-head predictor; everything trained in stage two.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead<T> {
    pub encoder: Vec<DilatedBlock<T>>,
    pub cls_hidden: Conv1d<T>,
    pub reg_hidden: Conv1d<T>,
    /// Regression-head features fed into the classification head.
    pub shortcut: Conv1d<T>,
    pub cls_out: Conv1d<T>,
    pub reg_out: Conv1d<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    features: Tensor<T>,
    encoder: Vec<DilatedCache<T>>,
    hc: Tensor<T>,
    hr: Tensor<T>,
    hc2: Tensor<T>,
}

impl<T: Scalar> DetectionHead<T> {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.extractor.out_channels();
        let h = config.head_channels;
        let n = config.anchors.len();
        let reduced = (c / config.reduction).max(1);
        let encoder = config
            .rates
            .iter()
            .map(|&r| DilatedBlock::new(c, reduced, r, &mut rng))
            .collect();
        let mut shortcut = Conv1d::zeros(h, h, 1, 1, 1, 0);
        shortcut.init_uniform(1.0, &mut rng);
        let mut cls_out = Conv1d::zeros(h, n * config.classes, 1, 1, 1, 0);
        cls_out.init_uniform(0.1, &mut rng);
        let prior = T::of(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        cls_out.bias.data_mut().fill(prior);
        let mut reg_out = Conv1d::zeros(h, n * 2, 1, 1, 1, 0);
        reg_out.init_uniform(0.01, &mut rng);
        Ok(Self {
            encoder,
            cls_hidden: Conv1d::same(c, h, 3, 1, 1, &mut rng),
            reg_hidden: Conv1d::same(c, h, 3, 1, 1, &mut rng),
            shortcut,
            cls_out,
            reg_out,
        })
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.reg_out.out_channels() / 2
    }

    pub fn classes(&self) -> usize {
        self.cls_out.out_channels() / self.anchors_per_cell()
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<(HeadOutput<T>, HeadCache<T>)> {
        let (_, _, m) = features.dims3()?;
        let mut encoder: Vec<DilatedCache<T>> = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let input = encoder.last().map_or(features, |c| c.output());
            encoder.push(block.forward(input)?);
        }
        let e = encoder.last().map_or(features, |c| c.output());
        let hc = relu(&self.cls_hidden.forward(e)?);
        let hr = relu(&self.reg_hidden.forward(e)?);
        let mut hc2 = self.shortcut.forward(&hr)?;
        hc2.add_assign(&hc)?;
        let logits_cm = self.cls_out.forward(&hc2)?;
        let offsets_cm = self.reg_out.forward(&hr)?;

        let n = self.anchors_per_cell();
        let out = HeadOutput {
            m,
            n,
            classes: self.classes(),
            logits: channel_major_to_position_major(logits_cm.data(), m),
            offsets: channel_major_to_position_major(offsets_cm.data(), m),
        };
        let cache = HeadCache {
            features: features.clone(),
            encoder,
            hc,
            hr,
            hc2,
        };
        Ok((out, cache))
    }

    /// Accumulate gradients given `∂L/∂logits` and `∂L/∂offsets` (same layout as
    /// [`HeadOutput`]); returns `∂L/∂features`.
    pub fn backward(&self, cache: &HeadCache<T>, dlogits: &[T], doffsets: &[T], grad: &mut Self) -> Result<Tensor<T>> {
        let m = cache.hc.shape()[cache.hc.shape().len() - 1];
        let dl = Tensor::from_vec(
            &[self.cls_out.out_channels(), m],
            position_major_to_channel_major(dlogits, m),
        )?;
        let doff = Tensor::from_vec(
            &[self.reg_out.out_channels(), m],
            position_major_to_channel_major(doffsets, m),
        )?;
        let dhc2 = self.cls_out.backward(&cache.hc2, &dl, &mut grad.cls_out)?;
        let mut dhr = self.reg_out.backward(&cache.hr, &doff, &mut grad.reg_out)?;
        dhr.add_assign(&self.shortcut.backward(&cache.hr, &dhc2, &mut grad.shortcut)?)?;
        let dhc = relu_backward(&cache.hc, &dhc2);
        let dhr = relu_backward(&cache.hr, &dhr);
        let e = cache.encoder.last().map_or(&cache.features, |c| c.output());
        let mut de = self.cls_hidden.backward(e, &dhc, &mut grad.cls_hidden)?;
        de.add_assign(&self.reg_hidden.backward(e, &dhr, &mut grad.reg_hidden)?)?;
        for (i, block) in self.encoder.iter().enumerate().rev() {
            de = block.backward(&cache.encoder[i], &de, &mut grad.encoder[i])?;
        }
        Ok(de)
    }
}

impl<T: Scalar> Module<T> for DetectionHead<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.extend(prefixed(&format!("encoder.{i}"), b.params()));
        }
        out.extend(prefixed("cls_hidden", self.cls_hidden.params()));
        out.extend(prefixed("reg_hidden", self.reg_hidden.params()));
        out.extend(prefixed("shortcut", self.shortcut.params()));
        out.extend(prefixed("cls_out", self.cls_out.params()));
        out.extend(prefixed("reg_out", self.reg_out.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("encoder.{i}"), b.params_mut()));
        }
        out.extend(prefixed_mut("cls_hidden", self.cls_hidden.params_mut()));
        out.extend(prefixed_mut("reg_hidden", self.reg_hidden.params_mut()));
        out.extend(prefixed_mut("shortcut", self.shortcut.params_mut()));
        out.extend(prefixed_mut("cls_out", self.cls_out.params_mut()));
        out.extend(prefixed_mut("reg_out", self.reg_out.params_mut()));
        out
    }
}

/// `[channels = n·k, m]` conv output to `[m][n][k]`.
fn channel_major_to_position_major<T: Scalar>(data: &[T], m: usize) -> Vec<T> {
    let ch = data.len() / m.max(1);
    let mut out = vec![T::zero(); data.len()];
    for c in 0..ch {
        for i in 0..m {
            out[i * ch + c] = data[c * m + i];
        }
    }
    out
}

fn position_major_to_channel_major<T: Scalar>(data: &[T], m: usize) -> Vec<T> {
    let ch = data.len() / m.max(1);
    let mut out = vec![T::zero(); data.len()];
    for i in 0..m {
        for c in 0..ch {
            out[c * m + i] = data[i * ch + c];
        }
    }
    out
}

/// Feature extractor, scale encoder and two-head predictor with their anchor set.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T> {
    pub config: DetectorConfig,
    pub extractor: Extractor<T>,
    pub head: DetectionHead<T>,
}

impl<T: Scalar> DetectorModel<T> {
    /// Fresh model; the head is seeded independently of the extractor.
    pub fn new(config: DetectorConfig, head_seed: u64) -> Result<Self> {
        let extractor = Extractor::new(config.extractor.clone())?;
        Self::with_extractor(config, extractor, head_seed)
    }

    pub fn with_extractor(mut config: DetectorConfig, extractor: Extractor<T>, head_seed: u64) -> Result<Self> {
        config.extractor = extractor.config.clone();
        let head = DetectionHead::new(&config, head_seed)?;
        Ok(Self {
            config,
            extractor,
            head,
        })
    }

    pub fn r_ds(&self) -> usize {
        self.config.extractor.r_ds
    }

    pub fn prepare_input(&self, bursts: &[i64]) -> Tensor<T> {
        self.extractor.prepare_input(bursts)
    }

    /// Anchor segments for `m` cell segments.
    pub fn anchors(&self, m: usize) -> Vec<Segment<T>> {
        build_anchors(m, &self.config.anchors, self.r_ds())
    }

    /// Class scores `m×n×|S|` and offsets `m×n×2` for a prepared `[1, 1, L]` input.
    pub fn forward_input(&self, input: &Tensor<T>) -> Result<HeadOutput<T>> {
        if input.is_empty() {
            return Err(Error::Data("empty input".into()));
        }
        let feats = self.extractor.forward(input)?;
        Ok(self.head.forward(feats.features())?.0)
    }

    /// [`Self::forward_input`] on a raw signed burst sequence.
    pub fn forward(&self, bursts: &[i64]) -> Result<HeadOutput<T>> {
        if bursts.is_empty() {
            return Err(Error::Data("empty burst sequence".into()));
        }
        self.forward_input(&self.prepare_input(bursts))
    }

    /// Forward, decode and filter: the candidate traces found in `bursts`.
    pub fn detect(&self, bursts: &[i64], score_thresh: f64, nms_thresh: f64) -> Result<Vec<CandidateTrace>> {
        let out = self.forward(bursts)?;
        let anchors = self.anchors(out.m);
        let proposals = decode_proposals(
            &anchors,
            &out.offsets,
            &out.scores(),
            out.classes,
            T::of(self.config.center_scale),
        )?;
        nms_filter(&proposals, score_thresh, nms_thresh)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(&self.config)?;
        ck.insert_module("extractor", &self.extractor);
        ck.insert_module("head", &self.head);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DetectorConfig = ck.config()?;
        let mut model = Self::new(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.load_module("extractor", &mut model.extractor)?;
        ck.load_module("head", &mut model.head)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
