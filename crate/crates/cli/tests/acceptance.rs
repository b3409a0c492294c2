//! End-to-end acceptance gate. Every criterion runs in sequence and prints a
//! single `PASS`/`FAIL` line; the test fails if any criterion does.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdaa_cli::commands::{run_ablation, ABLATION_ROWS};
use sdaa_cli::config::RunConfig;
use sdaa_core::data::{sample_episode, DataConfig, Episode, Split};
use sdaa_core::gradcheck::{check_op, check_params};
use sdaa_core::metrics::IouAccumulator;
use sdaa_core::model::{LossBundle, Mode, ModelConfig, SdaaNet};
use sdaa_core::sdpm::{masked_gap, self_distill_loss, KShotStrategy, Prototype};
use sdaa_core::train::{compute_gradients, poly_lr, train, Sgd, TrainConfig};
use sdaa_core::{Graph, PadMode, ParamStore, Tensor, Var};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Written straight to the process stdout so the lines survive output capture.
fn report(name: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[acceptance] {tag} {name}: {detail}");
    let _ = out.flush();
}

fn note(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[acceptance]      {line}");
    let _ = out.flush();
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| f64::from(u8::from(rng.gen_bool(0.5))))
}

type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&Graph<f64>, &[Var]) -> sdaa_core::Result<Var>>)>);

fn op_catalogue() -> Vec<OpCase> {
    let mut ops: Vec<OpCase> = Vec::new();
    macro_rules! op {
        ($name:expr, |$r:ident| $inputs:expr, $f:expr) => {
            ops.push(($name, Box::new(move |$r: &mut ChaCha8Rng| ($inputs, Box::new($f)))));
        };
    }
    op!("add", |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, x| g.add(x[0], x[1]));
    op!("sub", |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, x| g.sub(x[0], x[1]));
    op!("mul", |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])], |g, x| g.mul(x[0], x[1]));
    op!("scale", |r| vec![rand_tensor(r, &[5])], |g, x| Ok(g.scale(x[0], -1.7)));
    op!("add_scalar", |r| vec![rand_tensor(r, &[5])], |g, x| Ok(g.add_scalar(x[0], 0.3)));
    op!("mean_of", |r| vec![rand_tensor(r, &[2, 2]), rand_tensor(r, &[2, 2]), rand_tensor(r, &[2, 2])], |g, x| g.mean_of(x));
    op!("relu", |r| vec![off_kink(r, &[2, 6])], |g, x| Ok(g.relu(x[0])));
    op!("sigmoid", |r| vec![rand_tensor(r, &[2, 6])], |g, x| Ok(g.sigmoid(x[0])));
    op!("softmax", |r| vec![rand_tensor(r, &[3, 4])], |g, x| g.softmax(x[0], 1));
    op!("log_softmax", |r| vec![rand_tensor(r, &[3, 4])], |g, x| g.log_softmax(x[0], 0));
    op!("sum", |r| vec![rand_tensor(r, &[2, 3, 2])], |g, x| Ok(g.sum(x[0])));
    op!("mean", |r| vec![rand_tensor(r, &[2, 3, 2])], |g, x| Ok(g.mean(x[0])));
    op!("reshape", |r| vec![rand_tensor(r, &[2, 6])], |g, x| g.reshape(x[0], &[3, 4]));
    op!("linear", |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4]), rand_tensor(r, &[2])], |g, x| g.linear(x[0], x[1], x[2]));
    op!("conv2d", |r| vec![rand_tensor(r, &[2, 2, 5, 4]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3])], |g, x| g.conv2d(x[0], x[1], x[2], 2, 1));
    op!("conv2d_replicate", |r| vec![rand_tensor(r, &[1, 2, 4, 5]), rand_tensor(r, &[2, 2, 3, 3]), rand_tensor(r, &[2])], |g, x| {
        g.conv2d_padded(x[0], x[1], x[2], 1, 1, PadMode::Replicate)
    });
    op!("scale_channels", |r| vec![rand_tensor(r, &[2, 3, 2, 2]), rand_tensor(r, &[2, 3])], |g, x| g.scale_channels(x[0], x[1]));
    op!("broadcast_spatial", |r| vec![rand_tensor(r, &[2, 3])], |g, x| g.broadcast_spatial(x[0], 2, 3));
    op!("concat_channels", |r| vec![rand_tensor(r, &[2, 1, 2, 2]), rand_tensor(r, &[2, 3, 2, 2])], |g, x| g.concat_channels(x));
    op!("slice_batch", |r| vec![rand_tensor(r, &[3, 2, 2, 2])], |g, x| g.slice_batch(x[0], 1));
    op!("adaptive_avg_pool", |r| vec![rand_tensor(r, &[1, 2, 5, 4])], |g, x| g.adaptive_avg_pool(x[0], 3, 2));
    op!("bilinear_resize", |r| vec![rand_tensor(r, &[1, 2, 3, 2])], |g, x| g.bilinear_resize(x[0], 5, 7, true));
    ops.push((
        "masked_gap",
        Box::new(|r: &mut ChaCha8Rng| {
            let mask = binary(r, &[2, 1, 3, 3]);
            (vec![rand_tensor(r, &[2, 4, 3, 3])], Box::new(move |g: &Graph<f64>, x: &[Var]| g.masked_gap(x[0], &mask)) as Box<_>)
        }),
    ));
    ops.push((
        "cross_entropy_2d",
        Box::new(|r: &mut ChaCha8Rng| {
            let target = binary(r, &[2, 1, 3, 2]);
            (vec![rand_tensor(r, &[2, 2, 3, 2])], Box::new(move |g: &Graph<f64>, x: &[Var]| g.cross_entropy_2d(x[0], &target)) as Box<_>)
        }),
    ));
    ops
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value_mut().data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, make) in op_catalogue() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, op) = make(&mut rng);
            let r = check_op(&inputs, seed + 77, 1e-3, |g, x| op(g, x)).map_err(|e| format!("{name}: {e}"))?;
            if r.worst > worst_op.0 {
                worst_op = (r.worst, name);
            }
        }
    }

    let net = SdaaNet::new(ModelConfig { widths: [2, 2, 3, 3], feature_dim: 4, sse_reduction: 2, bins: vec![1, 2], ..ModelConfig::default() })
        .map_err(|e| e.to_string())?;
    let data = DataConfig { image_size: 8, min_fg: 2, max_attempts: 50, ..DataConfig::default() };
    let mut worst_e2e = 0.0f64;
    for seed in 0..20u64 {
        let mut store = net.init_params::<f64>(seed).map_err(|e| e.to_string())?;
        randomize(&mut store, seed + 1000);
        let k = 1 + seed as usize % 2;
        let strategy = if seed % 4 < 2 { KShotStrategy::Separate } else { KShotStrategy::Integral };
        let ep = Episode::generate(&data, seed as usize % 12, k, seed).map_err(|e| e.to_string())?;
        let r = check_params(&mut store, 1e-6, |s| {
            let g = Graph::new();
            let out = net.forward_episode(&g, s, &ep, Mode::Train, strategy, 0.0, 0.5)?;
            let total = out.losses.expect("train mode has losses").total;
            Ok((g, total))
        })
        .map_err(|e| e.to_string())?;
        worst_e2e = worst_e2e.max(r.worst);
    }
    let elapsed = start.elapsed();
    verdict(
        worst_op.0 < 1e-3 && worst_e2e < 1e-2 && elapsed < Duration::from_secs(60),
        format!(
            "per-op worst {:.2e} ({}), end-to-end worst {:.2e}, 20 instances each, {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_e2e,
            elapsed.as_secs_f64()
        ),
    )
}

fn kd_value(s: &[f64], q: &[f64]) -> f64 {
    let g = Graph::<f64>::new();
    let ps = Prototype(g.constant(Tensor::new(&[1, s.len()], s.to_vec()).unwrap()));
    let pq = Prototype(g.constant(Tensor::new(&[1, q.len()], q.to_vec()).unwrap()));
    g.scalar(self_distill_loss(&g, ps, pq).unwrap()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let values = [1.0, -2.0, 3.5, 0.25, 4.0, 8.0, -1.0, 0.5];
    let feature = Tensor::new(&[1, 2, 2, 2], values.to_vec()).unwrap();
    for bits in 0u32..16 {
        let mask: Vec<f64> = (0..4).map(|i| f64::from((bits >> i) & 1)).collect();
        let g = Graph::new();
        let p = masked_gap(&g, g.constant(feature.clone()), &Tensor::new(&[1, 1, 2, 2], mask.clone()).unwrap()).unwrap();
        let got = g.value(p.0);
        let weights = if bits == 0 { vec![1.0; 4] } else { mask };
        for c in 0..2 {
            let num: f64 = (0..4).map(|i| values[c * 4 + i] * weights[i]).sum();
            let expect = num / weights.iter().sum::<f64>();
            worst = worst.max((got.data()[c] - expect).abs());
        }
    }

    let l2 = 2f64.ln();
    worst = worst.max(kd_value(&[l2, 0.0], &[l2, 0.0]).abs());
    let kd = kd_value(&[l2, 0.0], &[0.0, l2]);
    worst = worst.max((kd - 0.5 * (9.0f64 / 8.0).ln()).abs());

    let bits = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<_>>();
    let mut acc = IouAccumulator::new();
    acc.add(0, &bits("11100000"), &bits("01110000")).unwrap();
    acc.add(0, &bits("1100"), &bits("0100")).unwrap();
    acc.add(1, &bits("101"), &bits("110")).unwrap();
    worst = worst.max((acc.mean_iou() - (3.0 / 6.0 + 1.0 / 3.0) / 2.0).abs());

    verdict(worst < 1e-6, format!("16 masks, KL fixtures 0 and {kd:.4}, 3-episode mIoU; max deviation {worst:.1e}"))
}

fn distillation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let softmax = |p: &[f64]| {
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = p.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (mut negative, mut zero_on_distinct, mut nonzero_on_equal) = (0, 0, 0);
    let mut min_distinct = f64::INFINITY;
    let mut max_equal = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(2..16);
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let kd = kd_value(&s, &q);
        if kd < 0.0 {
            negative += 1;
        }
        let gap = softmax(&s).iter().zip(softmax(&q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-7 {
            min_distinct = min_distinct.min(kd);
            if kd <= 0.0 {
                zero_on_distinct += 1;
            }
        }
        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let kd_eq = kd_value(&s, &shifted);
        max_equal = max_equal.max(kd_eq.abs());
        if kd_eq.abs() >= 1e-7 {
            nonzero_on_equal += 1;
        }
    }

    let net = SdaaNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let store = net.init_params::<f32>(3).map_err(|e| e.to_string())?;
    let ep = sample_episode(&DataConfig::default(), Split::Train, 0, 1, 11).map_err(|e| e.to_string())?;
    let run = |s| {
        let g = Graph::new();
        let out = net.forward_episode(&g, &store, &ep, Mode::Train, s, 50.0, 0.5).unwrap();
        let l = out.losses.unwrap().values(&g, 50.0, 0.5).unwrap();
        let mut bits: Vec<u32> = g.value(out.logits).data().iter().map(|v| v.to_bits()).collect();
        bits.extend([l.seg_ce, l.kd, l.support_ce, l.total].map(f32::to_bits));
        bits
    };
    let coincide = run(KShotStrategy::Integral) == run(KShotStrategy::Separate);

    verdict(
        negative == 0 && zero_on_distinct == 0 && nonzero_on_equal == 0 && coincide,
        format!(
            "1000 pairs: {negative} negative, min over distinct {min_distinct:.2e}, max over equal {max_equal:.1e}; K=1 bit-exact: {coincide}"
        ),
    )
}

fn no_leakage() -> Outcome {
    let net = SdaaNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let store = net.init_params::<f32>(5).map_err(|e| e.to_string())?;
    let data = DataConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut leaks = 0;
    for e in 0..50u64 {
        let ep = sample_episode(&data, Split::Test, (e % 4) as usize, 1 + (e % 3) as usize, 1000 + e).map_err(|e| e.to_string())?;
        let logits = |episode: &Episode| {
            let g = Graph::new();
            let out = net.forward_episode(&g, &store, episode, Mode::Eval, KShotStrategy::Separate, 50.0, 0.5).unwrap();
            g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let reference = logits(&ep);
        let shape = ep.query.mask.shape().to_vec();
        let substitutes = [
            Tensor::zeros(&shape),
            ep.query.mask.map(|v| 1.0 - v),
            Tensor::from_fn(&shape, |_| f32::from(u8::from(rng.gen_bool(0.5)))),
        ];
        for mask in substitutes {
            let mut swapped = ep.clone();
            swapped.query.mask = mask;
            if logits(&swapped) != reference {
                leaks += 1;
            }
        }
    }
    verdict(leaks == 0, format!("50 episodes x 3 substituted masks, {leaks} logit differences"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let net = SdaaNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut store = net.init_params::<f32>(0).map_err(|e| e.to_string())?;
    let episode = [sample_episode(&DataConfig::default(), Split::Train, 0, 1, 42).map_err(|e| e.to_string())?];
    let mut sgd = Sgd::new(0.9, 0.0);
    let (mut first, mut last) = (None, f32::NAN);
    for _ in 0..200 {
        let b = compute_gradients(&net, &mut store, &episode, KShotStrategy::Separate, 50.0, 0.5).map_err(|e| e.to_string())?;
        first.get_or_insert(b.total);
        last = b.total;
        sgd.step(&mut store, 0.02);
    }
    let first = first.unwrap_or(f32::NAN);
    let elapsed = start.elapsed();
    verdict(
        last < 0.1 * first && elapsed < Duration::from_secs(120),
        format!("total loss {first:.4} -> {last:.4} ({:.1}%), {:.1}s", 100.0 * last / first, elapsed.as_secs_f64()),
    )
}

/// Desk-scale training protocol shared by the ablation and strategy runs.
fn protocol() -> TrainConfig {
    TrainConfig { base_lr: 0.05, grad_clip: Some(1.0), max_iter: 2000, eval_episodes: 200, test_fold: 0, ..TrainConfig::default() }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn loss_drop(history: &[LossBundle]) -> f64 {
    let window = |s: &[LossBundle]| s.iter().map(|b| f64::from(b.total)).sum::<f64>() / s.len() as f64;
    let n = history.len().min(100);
    1.0 - window(&history[history.len() - n..]) / window(&history[..n])
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        out_dir: std::env::temp_dir(),
        model: ModelConfig::default(),
        train: protocol(),
        data: DataConfig::default(),
        seeds: SEEDS.to_vec(),
        folds: vec![0],
    };
    let mut drops = Vec::new();
    let table = run_ablation(&cfg, |name, _, seed, run| {
        let miou = run.final_report().map_or(f64::NAN, |r| r.miou * 100.0);
        let drop = loss_drop(&run.history);
        drops.push(drop);
        note(&format!("ablation {name:<10} seed={seed} miou={miou:.2} loss_drop={:.1}%", drop * 100.0));
    })
    .map_err(|e| e.to_string())?;
    for line in table.render().lines() {
        note(line);
    }
    let mean: Vec<f64> = (0..ABLATION_ROWS.len()).map(|r| table.row_mean(r)).collect();
    let (base, saam, sdpm, full) = (mean[0], mean[1], mean[2], mean[3]);
    let min_drop = drops.iter().cloned().fold(f64::INFINITY, f64::min);
    note(&format!("smallest 100-step moving-average loss reduction over 2000 steps: {:.1}%", min_drop * 100.0));
    let elapsed = start.elapsed();
    verdict(
        full >= saam && full >= sdpm && saam >= base && sdpm >= base && full - base >= 1.0 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "mean mIoU baseline {base:.2}, +SAAM {saam:.2}, +SDPM {sdpm:.2}, full {full:.2}; full-baseline {:+.2}; {:.0}s",
            full - base,
            elapsed.as_secs_f64()
        ),
    )
}

fn strategy_comparison() -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for strategy in [KShotStrategy::Integral, KShotStrategy::Separate] {
        let mut total = 0.0;
        for seed in SEEDS {
            let cfg = TrainConfig { k: 5, strategy, seed, ..protocol() };
            let run = train(&ModelConfig::default(), &cfg, &DataConfig::default()).map_err(|e| e.to_string())?;
            let miou = run.final_report().map_or(f64::NAN, |r| r.miou * 100.0);
            note(&format!("strategy {strategy} K=5 seed={seed} miou={miou:.2}"));
            total += miou;
        }
        means.push(total / SEEDS.len() as f64);
    }
    let (integral, separate) = (means[0], means[1]);
    let direction = if separate >= integral { "Separate >= Integral" } else { "Separate trails Integral" };
    verdict(
        separate >= integral - 1.0,
        format!("K=5 mean mIoU Integral {integral:.2}, Separate {separate:.2} ({direction}); {:.0}s", start.elapsed().as_secs_f64()),
    )
}

const PIPELINE: &str = "\
seed=7
max_iter=40
batch_size=2
eval_every=20
eval_episodes=20
base_lr=0.05
grad_clip=1
";

fn sdaa(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_sdaa")).args(args).env_remove("SDAA_SEED").output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("sdaa {}: {}", args[0], String::from_utf8_lossy(&o.stderr)))
    }
}

fn pipeline(root: &Path, tag: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let out = root.join(tag);
    let cfg = root.join(format!("{tag}.cfg"));
    std::fs::write(&cfg, format!("out_dir={}\n{PIPELINE}", out.display())).map_err(|e| e.to_string())?;
    let ckpt = out.join("checkpoint.sdaa");
    let eval_log = out.join("eval.log");
    let export = out.join("export");
    sdaa(&["train", "--config", cfg.to_str().unwrap()])?;
    sdaa(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--fold", "0", "--episodes", "20", "--seed", "3", "--log", eval_log.to_str().unwrap()])?;
    sdaa(&["export", "--ckpt", ckpt.to_str().unwrap(), "--episode-seed", "9", "--out", export.to_str().unwrap()])?;
    let mut files = vec![out.join("checkpoint.sdaa"), out.join("metrics.log"), eval_log];
    for name in ["attention.pgm", "similarity.pgm", "prediction.pgm"] {
        files.push(export.join(name));
    }
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(dir.path(), "a")?;
    let b = pipeline(dir.path(), "b")?;
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let total: usize = a.iter().map(|(_, bytes)| bytes.len()).sum();
    verdict(
        differing.is_empty(),
        format!("{} files ({total} bytes) compared across two runs; differing: {differing:?}", a.len()),
    )
}

fn schedule_and_loss() -> Outcome {
    let base = 0.01;
    let checks = [
        (poly_lr(0, 2000, base, 0.9), base),
        (poly_lr(1000, 2000, base, 0.9), base * 0.5f64.powf(0.9)),
        (poly_lr(2000, 2000, base, 0.9), 0.0),
    ];
    let lr_err = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let net = SdaaNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let store = net.init_params::<f32>(8).map_err(|e| e.to_string())?;
    let ep = sample_episode(&DataConfig::default(), Split::Train, 1, 2, 5).map_err(|e| e.to_string())?;
    let g = Graph::new();
    let out = net.forward_episode(&g, &store, &ep, Mode::Train, KShotStrategy::Separate, 50.0, 0.5).map_err(|e| e.to_string())?;
    let b = out.losses.ok_or("no losses in train mode")?.values(&g, 50.0, 0.5).map_err(|e| e.to_string())?;
    let expect = b.seg_ce + 50.0 * b.kd + 0.5 * b.support_ce;
    let exact = b.total == expect && b.kd > 0.0 && b.support_ce > 0.0;
    verdict(
        lr_err < 1e-7 && exact,
        format!("poly_lr max error {lr_err:.1e}; total {} == seg + 50 kd + 0.5 sup: {exact}", b.total),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("distillation invariants", distillation_invariants),
        ("no-leakage", no_leakage),
        ("schedule/loss arithmetic", schedule_and_loss),
        ("determinism", determinism),
        ("overfit sanity", overfit),
        ("structural ablation", ablation),
        ("strategy comparison", strategy_comparison),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = check();
        report(name, &outcome);
        if outcome.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
