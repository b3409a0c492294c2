//! Supervised affinity attention.
//!
//! Support and query features are each concatenated with the support
//! prototype and passed through one shared pyramid pooling extractor. A
//! two-channel head predicts the support mask (supervised by the support
//! labels); a one-channel head yields the query attention map.

use crate::autodiff::{Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::sdpm::{masked_gap, Prototype};
use crate::tensor::{ParamStore, Real, Tensor};

pub const DEFAULT_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling: pool to each bin size, project, upsample back, concat
/// with the input and merge with a 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidExtractor {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub merge: Conv2d,
}

impl PyramidExtractor {
    /// `in_channels` is the conditioned width (2D); output width is `out_channels` (D).
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, bins: &[usize]) -> Self {
        let branch_width = (out_channels / 4).max(1);
        let branches = bins
            .iter()
            .map(|b| Conv2d::pointwise(format!("{prefix}.bin{b}"), in_channels, branch_width))
            .collect();
        let merged_in = in_channels + branch_width * bins.len();
        Self {
            bins: bins.to_vec(),
            branches,
            merge: Conv2d::new(format!("{prefix}.merge"), merged_in, out_channels, 3, 1, 1)
                .with_pad_mode(PadMode::Replicate),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for b in &self.branches {
            b.init(store, seed)?;
        }
        self.merge.init(store, seed)
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let (h, w) = match shape[..] {
            [_, _, h, w] => (h, w),
            _ => return Err(Error::shape("pyramid_extract", "rank", 4, shape.len())),
        };
        let mut parts = vec![x];
        for (&bin, branch) in self.bins.iter().zip(&self.branches) {
            let pooled = g.adaptive_avg_pool(x, bin.min(h), bin.min(w))?;
            let projected = g.relu(branch.forward(g, store, pooled)?);
            parts.push(g.bilinear_resize(projected, h, w, true)?);
        }
        let cat = g.concat_channels(&parts)?;
        Ok(g.relu(self.merge.forward(g, store, cat)?))
    }
}

/// `[F ‖ broadcast(p)]` along channels.
pub fn build_conditioned_feature<T: Real>(g: &Graph<T>, feature: Var, prototype: Prototype) -> Result<Var> {
    let shape = g.shape(feature);
    let (h, w) = match shape[..] {
        [_, _, h, w] => (h, w),
        _ => return Err(Error::shape("build_conditioned_feature", "rank", 4, shape.len())),
    };
    let tiled = g.broadcast_spatial(prototype.0, h, w)?;
    g.concat_channels(&[feature, tiled])
}

pub fn pixel_cross_entropy<T: Real>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    g.cross_entropy_2d(logits, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Saam {
    pub pyramid: PyramidExtractor,
    pub support_head: Conv2d,
    pub query_head: Conv2d,
}

pub struct SaamOutput {
    /// `[N, 1, h, w]` in `[0, 1]`.
    pub query_attention: Var,
    /// One `[N, 2, h, w]` prediction per support.
    pub support_logits: Vec<Var>,
    pub support_ce_loss: Var,
}

impl Saam {
    pub fn new(prefix: &str, channels: usize, bins: &[usize]) -> Self {
        Self {
            pyramid: PyramidExtractor::new(&format!("{prefix}.ppm"), 2 * channels, channels, bins),
            support_head: Conv2d::pointwise(format!("{prefix}.support_head"), channels, 2),
            query_head: Conv2d::pointwise(format!("{prefix}.query_head"), channels, 1),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.pyramid.init(store, seed)?;
        self.support_head.init(store, seed)?;
        self.query_head.init(store, seed)
    }

    /// `support_masks` must already be at feature resolution.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        supports: &[Var],
        support_masks: &[Tensor<T>],
        query: Var,
    ) -> Result<SaamOutput> {
        if supports.is_empty() {
            return Err(Error::invalid("saam", "K must be at least 1"));
        }
        if supports.len() != support_masks.len() {
            return Err(Error::shape("saam", "support mask count", supports.len(), support_masks.len()));
        }
        for (&f, m) in supports.iter().zip(support_masks) {
            let fs = g.shape(f);
            if fs.len() != 4 || m.rank() != 4 || fs[2..] != m.shape()[2..] {
                return Err(Error::shape(
                    "saam",
                    "mask spatial size",
                    format!("{:?}", fs.get(2..).unwrap_or_default()),
                    format!("{:?}", m.shape().get(2..).unwrap_or_default()),
                ));
            }
        }

        let shots = supports
            .iter()
            .zip(support_masks)
            .map(|(&f, m)| masked_gap(g, f, m).map(|p| p.0))
            .collect::<Result<Vec<_>>>()?;
        let prototype = Prototype(g.mean_of(&shots)?);

        let mut support_logits = Vec::with_capacity(supports.len());
        let mut losses = Vec::with_capacity(supports.len());
        for (&f, m) in supports.iter().zip(support_masks) {
            let conditioned = build_conditioned_feature(g, f, prototype)?;
            let pyramid = self.pyramid.forward(g, store, conditioned)?;
            let logits = self.support_head.forward(g, store, pyramid)?;
            losses.push(pixel_cross_entropy(g, logits, m)?);
            support_logits.push(logits);
        }

        let conditioned = build_conditioned_feature(g, query, prototype)?;
        let pyramid = self.pyramid.forward(g, store, conditioned)?;
        let query_attention = g.sigmoid(self.query_head.forward(g, store, pyramid)?);

        Ok(SaamOutput {
            query_attention,
            support_logits,
            support_ce_loss: g.mean_of(&losses)?,
        })
    }
}
