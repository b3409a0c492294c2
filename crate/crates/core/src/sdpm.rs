//! Self-distillation guided prototypes.
//!
//! The support prototype drives a squeeze-and-excitation style bottleneck
//! whose sigmoid output reweights the channels of both support and query
//! features. Prototypes re-pooled from the reweighted features are then
//! distilled: the support distribution is pulled toward the average of the
//! support and query distributions. With K supports the query side either
//! shares one teacher built from the averaged reweighting vector
//! ([`KShotStrategy::Integral`]) or builds one teacher per support
//! ([`KShotStrategy::Separate`]).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, Tensor};

/// A `[N, D]` channel summary of a masked feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prototype(pub Var);

/// A `[N, D]` sigmoid output used to scale feature channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReweightVector(pub Var);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KShotStrategy {
    Integral,
    #[default]
    Separate,
}

impl FromStr for KShotStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integral" => Ok(Self::Integral),
            "separate" => Ok(Self::Separate),
            other => Err(Error::Config(format!("unknown strategy `{other}` (expected integral|separate)"))),
        }
    }
}

impl fmt::Display for KShotStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Integral => "integral",
            Self::Separate => "separate",
        })
    }
}

pub fn masked_gap<T: Real>(g: &Graph<T>, feature: Var, mask: &Tensor<T>) -> Result<Prototype> {
    g.masked_gap(feature, mask).map(Prototype)
}

/// Support-guided squeeze-and-excitation: `sigmoid(fc2(relu(fc1(p))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SseBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SseBlock {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            fc1: Linear::new(format!("{prefix}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, channels),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.fc1.init(store, seed)?;
        self.fc2.init(store, seed)
    }

    pub fn reweight_vector<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, prototype: Prototype) -> Result<ReweightVector> {
        let hidden = g.relu(self.fc1.forward(g, store, prototype.0)?);
        let logits = self.fc2.forward(g, store, hidden)?;
        Ok(ReweightVector(g.sigmoid(logits)))
    }
}

/// `(v ⊙ F + F) / 2`, scaling channel `c` of every sample by `v[n, c]`.
pub fn channel_reweight<T: Real>(g: &Graph<T>, feature: Var, v: ReweightVector) -> Result<Var> {
    let scaled = g.scale_channels(feature, v.0)?;
    let summed = g.add(scaled, feature)?;
    Ok(g.scale(summed, T::lit(0.5)))
}

/// `KL(d_t ‖ d_s)` with `d_s = softmax(p_s)`, `d_q = softmax(p_q)` and the
/// teacher `d_t = (d_s + d_q) / 2` held constant. Averaged over the batch
/// rows of the `[N, D]` prototypes.
pub fn self_distill_loss<T: Real>(g: &Graph<T>, support: Prototype, query: Prototype) -> Result<Var> {
    let (ss, qs) = (g.shape(support.0), g.shape(query.0));
    if ss != qs {
        return Err(Error::shape("self_distill_loss", "prototype shape", format!("{ss:?}"), format!("{qs:?}")));
    }
    if ss.len() != 2 {
        return Err(Error::shape("self_distill_loss", "prototype rank", 2, ss.len()));
    }
    let d_s = g.softmax(support.0, 1)?;
    let d_q = g.softmax(query.0, 1)?;
    let teacher = g.detach(g.scale(g.add(d_s, d_q)?, T::lit(0.5)));
    // 0 * log 0 = 0: an underflowed teacher entry contributes nothing
    let log_teacher = g.constant(g.value(teacher).map(|p| if p > T::zero() { p.ln() } else { T::zero() }));
    let log_student = g.log_softmax(support.0, 1)?;
    let gap = g.sub(log_teacher, log_student)?;
    let kl = g.sum(g.mul(teacher, gap)?);
    Ok(if ss[0] == 1 {
        kl
    } else {
        g.scale(kl, T::one() / T::lit(ss[0] as f64))
    })
}

pub struct SdpmOutput {
    /// Average of the reweighted support prototypes.
    pub intrinsic_prototype: Prototype,
    /// Reweighted query feature handed to the decoder.
    pub query_feature: Var,
    /// Reweighted support features, one per shot.
    pub support_features: Vec<Var>,
    /// Distillation loss; absent when no query mask was supplied.
    pub kd_loss: Option<Var>,
}

/// Full SDPM pass over K supports. `query_mask` is only consulted to build
/// teacher prototypes; without it the output depends on supports and the
/// query feature alone.
pub fn sdpm_forward<T: Real>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    sse: &SseBlock,
    supports: &[Var],
    support_masks: &[Tensor<T>],
    query: Var,
    query_mask: Option<&Tensor<T>>,
    strategy: KShotStrategy,
) -> Result<SdpmOutput> {
    if supports.is_empty() {
        return Err(Error::invalid("sdpm", "K must be at least 1"));
    }
    if supports.len() != support_masks.len() {
        return Err(Error::shape("sdpm", "support mask count", supports.len(), support_masks.len()));
    }

    let mut vectors = Vec::with_capacity(supports.len());
    let mut reweighted = Vec::with_capacity(supports.len());
    let mut prototypes = Vec::with_capacity(supports.len());
    for (&feature, mask) in supports.iter().zip(support_masks) {
        let p = masked_gap(g, feature, mask)?;
        let v = sse.reweight_vector(g, store, p)?;
        let f = channel_reweight(g, feature, v)?;
        prototypes.push(masked_gap(g, f, mask)?);
        vectors.push(v);
        reweighted.push(f);
    }

    let (query_feature, kd_loss) = match strategy {
        KShotStrategy::Integral => {
            let v_mean = ReweightVector(g.mean_of(&vectors.iter().map(|v| v.0).collect::<Vec<_>>())?);
            let fq = channel_reweight(g, query, v_mean)?;
            let kd = match query_mask {
                Some(mask) => {
                    let teacher = masked_gap(g, fq, mask)?;
                    let losses = prototypes
                        .iter()
                        .map(|&p| self_distill_loss(g, p, teacher))
                        .collect::<Result<Vec<_>>>()?;
                    Some(g.mean_of(&losses)?)
                }
                None => None,
            };
            (fq, kd)
        }
        KShotStrategy::Separate => {
            let per_shot = vectors
                .iter()
                .map(|&v| channel_reweight(g, query, v))
                .collect::<Result<Vec<_>>>()?;
            let kd = match query_mask {
                Some(mask) => {
                    let losses = per_shot
                        .iter()
                        .zip(&prototypes)
                        .map(|(&fq, &p)| self_distill_loss(g, p, masked_gap(g, fq, mask)?))
                        .collect::<Result<Vec<_>>>()?;
                    Some(g.mean_of(&losses)?)
                }
                None => None,
            };
            (g.mean_of(&per_shot)?, kd)
        }
    };

    let intrinsic = g.mean_of(&prototypes.iter().map(|p| p.0).collect::<Vec<_>>())?;
    Ok(SdpmOutput {
        intrinsic_prototype: Prototype(intrinsic),
        query_feature,
        support_features: reweighted,
        kd_loss,
    })
}
