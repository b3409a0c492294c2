//! Class mIoU over test episodes.
//!
//! Intersections and unions are accumulated per class over every episode and
//! only divided at the end, so large and small episodes weigh by pixel count.

use std::collections::BTreeMap;

use crate::autodiff::{bilinear, softmax_along, Graph};
use crate::data::{sample_episode, DataConfig, Split};
use crate::error::{Error, Result};
use crate::model::{Mode, SdaaNet};
use crate::sdpm::KShotStrategy;
use crate::tensor::{mix_seed, ParamStore, Tensor};

/// Relative size of the second inference scale.
pub const SECOND_SCALE: f64 = 1.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    counts: BTreeMap<usize, (u64, u64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: usize, predicted: &[bool], truth: &[bool]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("iou", "pixel count", truth.len(), predicted.len()));
        }
        let entry = self.counts.entry(class_id).or_default();
        for (&p, &t) in predicted.iter().zip(truth) {
            entry.0 += u64::from(p && t);
            entry.1 += u64::from(p || t);
        }
        Ok(())
    }

    /// `(intersection, union)` of one class.
    pub fn counts(&self, class_id: usize) -> Option<(u64, u64)> {
        self.counts.get(&class_id).copied()
    }

    /// IoU per class seen so far. A class whose union is empty scores 1.
    pub fn per_class(&self) -> BTreeMap<usize, f64> {
        self.counts
            .iter()
            .map(|(&c, &(i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            return 0.0;
        }
        per.values().sum::<f64>() / per.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub test_fold: usize,
    pub episodes: usize,
    pub k: usize,
    pub strategy: KShotStrategy,
    pub multi_scale: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
    pub episodes: usize,
    pub fold: usize,
    /// Number of masked-GAP calls that met an all-zero mask.
    pub empty_mask_fallbacks: usize,
}

/// Foreground decision per pixel from `[1, 2, h, w]` low-resolution logits.
///
/// Single scale upsamples the logits to `out_h x out_w` and takes the
/// softmax. Multi-scale additionally upsamples to 1.5x, takes the softmax
/// there, resizes those probabilities back and adds them. A pixel is
/// foreground when its foreground score strictly exceeds the background one.
pub fn predict_mask(low_logits: &Tensor, out_h: usize, out_w: usize, multi_scale: bool) -> Result<Vec<bool>> {
    let mut probs = softmax_along(&bilinear(low_logits, out_h, out_w, true)?, 1, false)?;
    if multi_scale {
        let sh = (out_h as f64 * SECOND_SCALE).round() as usize;
        let sw = (out_w as f64 * SECOND_SCALE).round() as usize;
        let second = softmax_along(&bilinear(low_logits, sh, sw, true)?, 1, false)?;
        let back = bilinear(&second, out_h, out_w, true)?;
        probs.data_mut().iter_mut().zip(back.data()).for_each(|(p, q)| *p += q);
    }
    let plane = out_h * out_w;
    let (bg, fg) = probs.data().split_at(plane);
    Ok(bg.iter().zip(&fg[..plane]).map(|(b, f)| f > b).collect())
}

pub fn evaluate(net: &SdaaNet, store: &ParamStore, data: &DataConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::invalid("evaluate", "episode count must be positive"));
    }
    if cfg.k == 0 {
        return Err(Error::invalid("evaluate", "K must be at least 1"));
    }
    let mut acc = IouAccumulator::new();
    let mut fallbacks = 0;
    for e in 0..cfg.episodes {
        let episode = sample_episode(data, Split::Test, cfg.test_fold, cfg.k, mix_seed(cfg.seed, e as u64))?;
        let g = Graph::new();
        let out = net.forward_episode(&g, store, &episode, Mode::Eval, cfg.strategy, 0.0, 0.0)?;
        fallbacks += g.empty_mask_fallbacks();
        let predicted = predict_mask(&g.value(out.low_logits), data.image_size, data.image_size, cfg.multi_scale)?;
        let truth: Vec<bool> = episode.query.mask.data().iter().map(|&m| m > 0.5).collect();
        acc.add(episode.class_id, &predicted, &truth)?;
    }
    Ok(EvalReport {
        per_class: acc.per_class(),
        miou: acc.mean_iou(),
        episodes: cfg.episodes,
        fold: cfg.test_fold,
        empty_mask_fallbacks: fallbacks,
    })
}
