//! Episodic training: SGD with momentum and weight decay under a poly schedule.

use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::data::{sample_episode, DataConfig, Episode, Split, NUM_FOLDS};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::model::{LossBundle, LossTerms, Mode, ModelConfig, SdaaNet};
use crate::sdpm::KShotStrategy;
use crate::tensor::{mix_seed, ParamStore};

/// `base_lr * (1 - iter / max_iter)^power`, clamped at zero past the end.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
    /// Episodes per step.
    pub batch_size: usize,
    pub alpha: f32,
    pub beta: f32,
    pub k: usize,
    pub strategy: KShotStrategy,
    pub seed: u64,
    pub test_fold: usize,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub multi_scale: bool,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: 2000,
            batch_size: 4,
            alpha: 50.0,
            beta: 0.5,
            k: 1,
            strategy: KShotStrategy::Separate,
            seed: 0,
            test_fold: 0,
            eval_every: 0,
            eval_episodes: 200,
            multi_scale: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_owned()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative");
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return fail("power must lie in (0, 1]");
        }
        if self.max_iter == 0 || self.batch_size == 0 || self.k == 0 || self.eval_episodes == 0 {
            return fail("max_iter, batch_size, k and eval_episodes must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return fail("alpha and beta must be non-negative");
        }
        if self.test_fold >= NUM_FOLDS {
            return fail("test_fold must be 0..3");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, 0)
    }

    /// Seed of the `j`-th training episode of step `iter`.
    pub fn episode_seed(&self, iter: usize, j: usize) -> u64 {
        mix_seed(mix_seed(self.seed, 1), (iter * self.batch_size + j) as u64)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            test_fold: self.test_fold,
            episodes: self.eval_episodes,
            k: self.k,
            strategy: self.strategy,
            multi_scale: self.multi_scale,
            seed: mix_seed(self.seed, 2),
        }
    }
}

/// `v <- momentum * v + grad + weight_decay * p`, `p <- p - lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        for (name, p) in store.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_owned())
                .or_insert_with(|| vec![0.0; p.grad.numel()]);
            let grad = p.grad.data().to_vec();
            for ((vi, &gi), pi) in v.iter_mut().zip(&grad).zip(p.value_mut().data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Scale all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = store
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>())
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Forward a batch of episodes, backpropagate the batch-mean loss and
/// return its components. Gradients are left in `store`.
pub fn compute_gradients(
    net: &SdaaNet,
    store: &mut ParamStore,
    episodes: &[Episode],
    strategy: KShotStrategy,
    alpha: f32,
    beta: f32,
) -> Result<LossBundle> {
    let g = Graph::new();
    let terms = episodes
        .iter()
        .map(|ep| {
            let out = net.forward_episode(&g, store, ep, Mode::Train, strategy, alpha, beta)?;
            out.losses.ok_or_else(|| Error::invalid("train", "training forward produced no loss"))
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = LossTerms::mean(&g, &terms, alpha, beta)?;
    let bundle = batch.values(&g, alpha, beta)?;
    g.backward(batch.total, store)?;
    Ok(bundle)
}

pub struct TrainRun {
    pub net: SdaaNet,
    pub store: ParamStore,
    /// Loss components of every step.
    pub history: Vec<LossBundle>,
    /// One line per evaluation.
    pub log: Vec<String>,
    pub reports: Vec<(usize, EvalReport)>,
}

impl TrainRun {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.reports.last().map(|(_, r)| r)
    }
}

pub fn log_line(iter: usize, report: &EvalReport, history: &[LossBundle]) -> String {
    let recent = &history[history.len().saturating_sub(100)..];
    let loss = if recent.is_empty() {
        0.0
    } else {
        recent.iter().map(|b| b.total as f64).sum::<f64>() / recent.len() as f64
    };
    format!(
        "iter={iter} fold={} miou={:.4} episodes={} loss={loss:.4} fallbacks={}",
        report.fold, report.miou, report.episodes, report.empty_mask_fallbacks
    )
}

/// Train from scratch on the training classes of `cfg.test_fold`'s split and
/// evaluate on the held-out fold.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &DataConfig) -> Result<TrainRun> {
    train_with(model, cfg, data, |_, _| {})
}

/// [`train`] with a callback receiving the step index and its losses.
pub fn train_with(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &DataConfig,
    mut on_step: impl FnMut(usize, &LossBundle),
) -> Result<TrainRun> {
    cfg.validate()?;
    data.validate()?;
    let net = SdaaNet::new(model.clone())?;
    let mut store = net.init_params::<f32>(cfg.init_seed())?;
    let mut sgd = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    let mut history = Vec::with_capacity(cfg.max_iter);
    let mut log = Vec::new();
    let mut reports = Vec::new();
    let eval_cfg = cfg.eval_config();

    for iter in 0..cfg.max_iter {
        let episodes = (0..cfg.batch_size)
            .map(|j| sample_episode(data, Split::Train, cfg.test_fold, cfg.k, cfg.episode_seed(iter, j)))
            .collect::<Result<Vec<_>>>()?;
        let bundle = compute_gradients(&net, &mut store, &episodes, cfg.strategy, cfg.alpha, cfg.beta)?;
        if !bundle.total.is_finite() {
            return Err(Error::invalid("train", format!("loss diverged at step {iter}")));
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut store, c as f32);
        }
        sgd.step(&mut store, poly_lr(iter, cfg.max_iter, cfg.base_lr, cfg.power) as f32);
        on_step(iter, &bundle);
        history.push(bundle);

        let done = iter + 1;
        if done == cfg.max_iter || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let report = evaluate(&net, &store, data, &eval_cfg)?;
            log.push(log_line(done, &report, &history));
            reports.push((done, report));
        }
    }
    Ok(TrainRun {
        net,
        store,
        history,
        log,
        reports,
    })
}
