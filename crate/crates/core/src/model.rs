//! The assembled network: shared encoder, SDPM, SAAM and the fusion decoder.

use crate::autodiff::{Graph, Var};
use crate::data::{downsample_mask, Episode};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::saam::{pixel_cross_entropy, Saam, DEFAULT_BINS};
use crate::sdpm::{masked_gap, sdpm_forward, KShotStrategy, Prototype, SseBlock};
use crate::tensor::{ParamStore, Real, Tensor};

/// Total downsampling of the encoder.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the four encoder stages.
    pub widths: [usize; 4],
    /// Feature width D shared by SDPM, SAAM and the decoder.
    pub feature_dim: usize,
    pub sse_reduction: usize,
    pub bins: Vec<usize>,
    pub use_sdpm: bool,
    pub use_saam: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            feature_dim: 64,
            sse_reduction: 4,
            bins: DEFAULT_BINS.to_vec(),
            use_sdpm: true,
            use_saam: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config("encoder widths and feature_dim must be positive".into()));
        }
        if self.sse_reduction == 0 || self.sse_reduction > self.feature_dim {
            return Err(Error::Config("sse_reduction must lie in 1..=feature_dim".into()));
        }
        if self.bins.is_empty() || self.bins.contains(&0) {
            return Err(Error::Config("pyramid bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
    pub reduce: Conv2d,
}

impl Encoder {
    pub fn new(widths: [usize; 4], feature_dim: usize) -> Self {
        let strides = [2, 2, 2, 1];
        let mut cin = 3;
        let stages = widths
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&cout, stride))| {
                let conv = Conv2d::new(format!("encoder.stage{}", i + 1), cin, cout, 3, stride, 1);
                cin = cout;
                conv
            })
            .collect();
        Self {
            stages,
            reduce: Conv2d::pointwise("encoder.reduce", widths[3], feature_dim),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for s in &self.stages {
            s.init(store, seed)?;
        }
        self.reduce.init(store, seed)
    }

    /// `[N, 3, H, W]` images in `[0, 1]` to `[N, D, H/8, W/8]` features.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Var> {
        let (_, c, h, w) = images.dims4("encode")?;
        if c != 3 {
            return Err(Error::shape("encode", "image channels", 3, c));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::shape("encode", "image size", format!("multiple of {OUTPUT_STRIDE}"), format!("{h}x{w}")));
        }
        let mut x = g.constant(images.clone());
        for stage in &self.stages {
            x = g.relu(stage.forward(g, store, x)?);
        }
        Ok(g.relu(self.reduce.forward(g, store, x)?))
    }
}

/// Fuses `[query feature ‖ prototype ‖ attention]` into two-class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub classifier: Conv2d,
}

impl Decoder {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            conv1: Conv2d::new("decoder.conv1", 2 * feature_dim + 1, feature_dim, 3, 1, 1),
            conv2: Conv2d::new("decoder.conv2", feature_dim, feature_dim, 3, 1, 1),
            classifier: Conv2d::pointwise("decoder.classifier", feature_dim, 2),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.conv1.init(store, seed)?;
        self.conv2.init(store, seed)?;
        self.classifier.init(store, seed)
    }

    /// Logits at feature resolution, `[N, 2, h, w]`.
    pub fn forward_low<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, prototype: Prototype, query: Var, attention: Var) -> Result<Var> {
        let shape = g.shape(query);
        let (h, w) = match shape[..] {
            [_, _, h, w] => (h, w),
            _ => return Err(Error::shape("decode", "query feature rank", 4, shape.len())),
        };
        let tiled = g.broadcast_spatial(prototype.0, h, w)?;
        let fused = g.concat_channels(&[query, tiled, attention])?;
        let x = g.relu(self.conv1.forward(g, store, fused)?);
        let x = g.relu(self.conv2.forward(g, store, x)?);
        self.classifier.forward(g, store, x)
    }

    /// Logits upsampled to `out_h x out_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        prototype: Prototype,
        query: Var,
        attention: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let low = self.forward_low(g, store, prototype, query, attention)?;
        g.bilinear_resize(low, out_h, out_w, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Query mask available; losses are computed.
    Train,
    /// Query mask never read.
    Eval,
}

/// Scalar loss values of one step: `total = seg_ce + alpha * kd + beta * support_ce`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle<T = f32> {
    pub seg_ce: T,
    pub kd: T,
    pub support_ce: T,
    pub total: T,
    pub alpha: T,
    pub beta: T,
}

/// Graph handles of the loss terms; absent terms belong to disabled modules.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub seg_ce: Var,
    pub kd: Option<Var>,
    pub support_ce: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    /// Combine the components, adding the weighted terms left to right.
    pub fn combine<T: Real>(g: &Graph<T>, seg_ce: Var, kd: Option<Var>, support_ce: Option<Var>, alpha: T, beta: T) -> Result<Self> {
        let mut total = seg_ce;
        if let Some(kd) = kd {
            total = g.add(total, g.scale(kd, alpha))?;
        }
        if let Some(sc) = support_ce {
            total = g.add(total, g.scale(sc, beta))?;
        }
        Ok(Self {
            seg_ce,
            kd,
            support_ce,
            total,
        })
    }

    /// Component-wise mean over episodes, recombined.
    pub fn mean<T: Real>(g: &Graph<T>, items: &[LossTerms], alpha: T, beta: T) -> Result<Self> {
        let seg = g.mean_of(&items.iter().map(|t| t.seg_ce).collect::<Vec<_>>())?;
        let kd: Option<Vec<Var>> = items.iter().map(|t| t.kd).collect();
        let sc: Option<Vec<Var>> = items.iter().map(|t| t.support_ce).collect();
        let kd = kd.map(|v| g.mean_of(&v)).transpose()?;
        let sc = sc.map(|v| g.mean_of(&v)).transpose()?;
        Self::combine(g, seg, kd, sc, alpha, beta)
    }

    pub fn values<T: Real>(&self, g: &Graph<T>, alpha: T, beta: T) -> Result<LossBundle<T>> {
        let opt = |v: Option<Var>| v.map(|v| g.scalar(v)).transpose().map(|x| x.unwrap_or_else(T::zero));
        Ok(LossBundle {
            seg_ce: g.scalar(self.seg_ce)?,
            kd: opt(self.kd)?,
            support_ce: opt(self.support_ce)?,
            total: g.scalar(self.total)?,
            alpha,
            beta,
        })
    }
}

pub struct EpisodeOutput {
    /// `[1, 2, H, W]`.
    pub logits: Var,
    /// `[1, 2, h, w]` before upsampling.
    pub low_logits: Var,
    /// `[1, 1, h, w]`; all ones without SAAM.
    pub attention: Var,
    /// Prototype fed to the decoder.
    pub prototype: Prototype,
    /// Encoder features of each support, `[1, D, h, w]`.
    pub support_features: Vec<Var>,
    pub losses: Option<LossTerms>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdaaNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub sse: Option<SseBlock>,
    pub saam: Option<Saam>,
    pub decoder: Decoder,
}

impl SdaaNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        Ok(Self {
            encoder: Encoder::new(config.widths, d),
            sse: config.use_sdpm.then(|| SseBlock::new("sdpm.sse", d, config.sse_reduction)),
            saam: config.use_saam.then(|| Saam::new("saam", d, &config.bins)),
            decoder: Decoder::new(d),
            config,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, seed)?;
        if let Some(sse) = &self.sse {
            sse.init(&mut store, seed)?;
        }
        if let Some(saam) = &self.saam {
            saam.init(&mut store, seed)?;
        }
        self.decoder.init(&mut store, seed)?;
        Ok(store)
    }

    /// Recover the architecture from parameter names and shapes.
    pub fn from_params<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let conv_out = |name: &str| -> Result<usize> {
            store
                .value(name)?
                .shape()
                .first()
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` has rank 0")))
        };
        let mut widths = [0; 4];
        for (i, w) in widths.iter_mut().enumerate() {
            *w = conv_out(&format!("encoder.stage{}.weight", i + 1))?;
        }
        let feature_dim = conv_out("encoder.reduce.weight")?;
        let use_sdpm = store.contains("sdpm.sse.fc1.weight");
        let sse_reduction = if use_sdpm {
            feature_dim / conv_out("sdpm.sse.fc1.weight")?.max(1)
        } else {
            ModelConfig::default().sse_reduction.min(feature_dim)
        };
        let mut bins: Vec<usize> = store
            .names()
            .filter_map(|n| n.strip_prefix("saam.ppm.bin")?.strip_suffix(".weight")?.parse().ok())
            .collect();
        bins.sort_unstable();
        let use_saam = !bins.is_empty();
        if !use_saam {
            bins = DEFAULT_BINS.to_vec();
        }
        let net = Self::new(ModelConfig {
            widths,
            feature_dim,
            sse_reduction,
            bins,
            use_sdpm,
            use_saam,
        })?;
        let expected = net.init_params::<T>(0)?;
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match the inferred architecture ({})",
                store.len(),
                expected.len()
            )));
        }
        for (name, p) in expected.iter() {
            let found = store.value(name)?.shape();
            if found != p.value().shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {found:?}, expected {:?}", p.value().shape())));
            }
        }
        Ok(net)
    }

    pub fn encode<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Var> {
        self.encoder.forward(g, store, images)
    }

    /// Run one episode end to end. In [`Mode::Eval`] the query mask is not
    /// read and no losses are produced.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_episode<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        episode: &Episode,
        mode: Mode,
        strategy: KShotStrategy,
        alpha: T,
        beta: T,
    ) -> Result<EpisodeOutput> {
        let k = episode.k();
        if k == 0 {
            return Err(Error::invalid("forward_episode", "episode has no supports"));
        }
        let images: Vec<Tensor<T>> = episode
            .support
            .iter()
            .chain(std::iter::once(&episode.query))
            .map(|s| s.image.cast())
            .collect();
        let batch = Tensor::stack_batch(&images)?;
        let (_, _, img_h, img_w) = batch.dims4("forward_episode")?;
        let features = self.encode(g, store, &batch)?;
        let (h, w) = (img_h / OUTPUT_STRIDE, img_w / OUTPUT_STRIDE);
        let supports = (0..k).map(|i| g.slice_batch(features, i)).collect::<Result<Vec<_>>>()?;
        let query = g.slice_batch(features, k)?;
        let support_masks = episode
            .support
            .iter()
            .map(|s| downsample_mask(&s.mask.cast::<T>(), h, w))
            .collect::<Result<Vec<_>>>()?;
        let query_mask = match mode {
            Mode::Train => Some(downsample_mask(&episode.query.mask.cast::<T>(), h, w)?),
            Mode::Eval => None,
        };

        let (prototype, query_feature, kd) = match &self.sse {
            Some(sse) => {
                let out = sdpm_forward(g, store, sse, &supports, &support_masks, query, query_mask.as_ref(), strategy)?;
                (out.intrinsic_prototype, out.query_feature, out.kd_loss)
            }
            None => {
                let shots = supports
                    .iter()
                    .zip(&support_masks)
                    .map(|(&f, m)| masked_gap(g, f, m).map(|p| p.0))
                    .collect::<Result<Vec<_>>>()?;
                (Prototype(g.mean_of(&shots)?), query, None)
            }
        };

        let (attention, support_ce) = match &self.saam {
            Some(saam) => {
                let out = saam.forward(g, store, &supports, &support_masks, query)?;
                (out.query_attention, Some(out.support_ce_loss))
            }
            None => (g.constant(Tensor::ones(&[1, 1, h, w])), None),
        };

        let low_logits = self.decoder.forward_low(g, store, prototype, query_feature, attention)?;
        let logits = g.bilinear_resize(low_logits, img_h, img_w, true)?;

        let losses = match mode {
            Mode::Train => {
                let seg = pixel_cross_entropy(g, logits, &episode.query.mask.cast::<T>())?;
                Some(LossTerms::combine(g, seg, kd, support_ce, alpha, beta)?)
            }
            Mode::Eval => None,
        };

        Ok(EpisodeOutput {
            logits,
            low_logits,
            attention,
            prototype,
            support_features: supports,
            losses,
        })
    }
}

/// Per-position cosine similarity between a `[1, D, h, w]` feature map and
/// a length-D prototype: `x·p / (‖x‖‖p‖ + 1e-8)`.
pub fn cosine_similarity_map(feature: &Tensor, prototype: &[f32]) -> Result<Tensor> {
    let (n, d, h, w) = feature.dims4("cosine_similarity_map")?;
    if n != 1 {
        return Err(Error::shape("cosine_similarity_map", "batch", 1, n));
    }
    if prototype.len() != d {
        return Err(Error::shape("cosine_similarity_map", "prototype length", d, prototype.len()));
    }
    let hw = h * w;
    let p_norm = prototype.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let out = (0..hw)
        .map(|pos| {
            let (mut dot, mut norm) = (0.0f64, 0.0f64);
            for (c, &p) in prototype.iter().enumerate() {
                let x = feature.data()[c * hw + pos] as f64;
                dot += x * p as f64;
                norm += x * x;
            }
            (dot / (norm.sqrt() * p_norm + 1e-8)) as f32
        })
        .collect();
    Tensor::new(&[1, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            widths: [4, 4, 6, 6],
            feature_dim: 8,
            sse_reduction: 4,
            bins: vec![1, 2],
            use_sdpm: true,
            use_saam: true,
        }
    }

    fn small_data() -> DataConfig {
        DataConfig {
            image_size: 16,
            min_fg: 4,
            ..DataConfig::default()
        }
    }

    #[test]
    fn cosine_examples() {
        let f = Tensor::new(&[1, 2, 1, 3], vec![1.0, 0.0, 2.0, 1.0, 1.0, 2.0]).unwrap();
        let map = cosine_similarity_map(&f, &[1.0, 1.0]).unwrap();
        assert!((map.data()[0] - 1.0).abs() < 1e-6);
        assert!((map.data()[1] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((map.data()[2] - 1.0).abs() < 1e-6);
        let orth = cosine_similarity_map(&f, &[0.0, 1.0]).unwrap();
        assert!((orth.data()[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let zero = cosine_similarity_map(&Tensor::zeros(&[1, 2, 1, 1]), &[1.0, 0.0]).unwrap();
        assert_eq!(zero.data(), &[0.0]);
    }

    #[test]
    fn encoder_output_stride_and_shared_weights() {
        let net = SdaaNet::new(tiny()).unwrap();
        let store = net.init_params::<f32>(3).unwrap();
        let img = Tensor::from_fn(&[1, 3, 16, 24], |i| ((i * 7) % 11) as f32 / 11.0);
        let g = Graph::new();
        let a = net.encode(&g, &store, &img).unwrap();
        let b = net.encode(&g, &store, &img).unwrap();
        assert_eq!(g.shape(a), [1, 8, 2, 3]);
        assert_eq!(g.value(a).data(), g.value(b).data());
        assert!(net.encode(&g, &store, &Tensor::zeros(&[1, 3, 12, 16])).is_err());
    }

    #[test]
    fn decoder_fuses_2d_plus_one_channels() {
        let net = SdaaNet::new(tiny()).unwrap();
        let store = net.init_params::<f32>(3).unwrap();
        assert_eq!(store.value("decoder.conv1.weight").unwrap().shape(), [8, 17, 3, 3]);
        let g = Graph::new();
        let q = g.constant(Tensor::ones(&[1, 8, 2, 2]));
        let p = Prototype(g.constant(Tensor::ones(&[1, 8])));
        let a = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let out = net.decoder.forward(&g, &store, p, q, a, 16, 16).unwrap();
        assert_eq!(g.shape(out), [1, 2, 16, 16]);
    }

    #[test]
    fn architecture_round_trips_through_param_names() {
        for (sdpm, saam) in [(true, true), (true, false), (false, true), (false, false)] {
            let cfg = ModelConfig {
                use_sdpm: sdpm,
                use_saam: saam,
                bins: vec![1, 3],
                ..tiny()
            };
            let net = SdaaNet::new(cfg.clone()).unwrap();
            let store = net.init_params::<f32>(0).unwrap();
            let back = SdaaNet::from_params(&store).unwrap();
            assert_eq!(back.config.use_sdpm, sdpm);
            assert_eq!(back.config.use_saam, saam);
            if saam {
                assert_eq!(back.config, cfg);
            }
        }
    }

    #[test]
    fn baseline_graph_has_no_module_parameters() {
        let net = SdaaNet::new(ModelConfig {
            use_sdpm: false,
            use_saam: false,
            ..tiny()
        })
        .unwrap();
        let store = net.init_params::<f32>(0).unwrap();
        assert!(store.names().all(|n| n.starts_with("encoder.") || n.starts_with("decoder.")));
        let ep = Episode::generate(&small_data(), 0, 1, 9).unwrap();
        let g = Graph::new();
        let out = net
            .forward_episode(&g, &store, &ep, Mode::Train, KShotStrategy::Separate, 50.0, 0.5)
            .unwrap();
        let losses = out.losses.unwrap();
        let bundle = losses.values(&g, 50.0, 0.5).unwrap();
        assert_eq!(bundle.total, bundle.seg_ce);
        assert!(g.param_names().iter().all(|n| !n.starts_with("sdpm") && !n.starts_with("saam")));
    }
}
