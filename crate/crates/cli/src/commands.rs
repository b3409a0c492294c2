//! Subcommand implementations. Each writes its artifacts under a directory
//! and its human-readable report to `out`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use sdaa_core::checkpoint;
use sdaa_core::data::{sample_episode, DataConfig, Split};
use sdaa_core::metrics::{evaluate, predict_mask, EvalConfig, EvalReport};
use sdaa_core::model::{cosine_similarity_map, Mode, ModelConfig, SdaaNet};
use sdaa_core::sdpm::{masked_gap, KShotStrategy};
use sdaa_core::train::{train, TrainRun};
use sdaa_core::{Graph, Tensor};

use crate::config::RunConfig;
use crate::heatmap::{HeatmapImage, Range};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.sdaa";
pub const METRICS_FILE: &str = "metrics.log";
pub const ABLATION_FILE: &str = "ablation.txt";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_report(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(sdaa_core::Error::from)?;
    Ok(())
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    for (class, iou) in &report.per_class {
        let _ = writeln!(s, "class {class:>2}: IoU {iou:.4}");
    }
    let _ = writeln!(
        s,
        "fold {}: mIoU {:.4} over {} episodes ({} empty-mask fallbacks)",
        report.fold, report.miou, report.episodes, report.empty_mask_fallbacks
    );
    s
}

/// Train, then save the checkpoint and metrics log into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainRun, CliError> {
    ensure_dir(&cfg.out_dir)?;
    let run = train(&cfg.model, &cfg.train, &cfg.data)?;
    checkpoint::save(&run.store, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    let mut log = run.log.join("\n");
    log.push('\n');
    std::fs::write(cfg.out_dir.join(METRICS_FILE), &log).map_err(sdaa_core::Error::from)?;
    write_report(out, &log)?;
    if let Some(report) = run.final_report() {
        write_report(out, &format_report(report))?;
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub fold: usize,
    pub episodes: usize,
    pub k: usize,
    pub strategy: KShotStrategy,
    pub multi_scale: bool,
    pub seed: u64,
    /// Metrics line destination; defaults to `<checkpoint>.eval.log`.
    pub log: Option<PathBuf>,
}

pub fn load_model(path: &Path) -> Result<(SdaaNet, sdaa_core::ParamStore), CliError> {
    let store = checkpoint::load(path)?;
    let net = SdaaNet::from_params(&store)?;
    Ok((net, store))
}

pub fn cmd_eval(args: &EvalArgs, data: &DataConfig, out: &mut dyn Write) -> Result<EvalReport, CliError> {
    if args.episodes == 0 {
        return Err(CliError::Config("--episodes must be positive".into()));
    }
    if args.k == 0 {
        return Err(CliError::Config("--k must be positive".into()));
    }
    if args.fold >= sdaa_core::data::NUM_FOLDS {
        return Err(CliError::Config(format!("--fold must be 0..3, got {}", args.fold)));
    }
    let (net, store) = load_model(&args.checkpoint)?;
    let report = evaluate(
        &net,
        &store,
        data,
        &EvalConfig {
            test_fold: args.fold,
            episodes: args.episodes,
            k: args.k,
            strategy: args.strategy,
            multi_scale: args.multi_scale,
            seed: args.seed,
        },
    )?;
    let line = format!(
        "iter=eval fold={} miou={:.4} episodes={} k={} strategy={} multi_scale={}\n",
        report.fold, report.miou, report.episodes, args.k, args.strategy, args.multi_scale
    );
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.checkpoint.clone().into_os_string();
        p.push(".eval.log");
        PathBuf::from(p)
    });
    std::fs::write(&log_path, &line).map_err(sdaa_core::Error::from)?;
    write_report(out, &format_report(&report))?;
    Ok(report)
}

pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("Baseline", false, false),
    ("+SAAM", false, true),
    ("+SDPM", true, false),
    ("SDPM+SAAM", true, true),
];

/// Mean mIoU (in points) per ablation row and fold, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `rows[r][f]`: row `r` of [`ABLATION_ROWS`] on `folds[f]`.
    pub rows: Vec<Vec<f64>>,
    /// Every individual run: `(row, fold, seed, miou points)`.
    pub runs: Vec<(usize, usize, u64, f64)>,
}

impl AblationTable {
    pub fn row_mean(&self, row: usize) -> f64 {
        let r = &self.rows[row];
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn render(&self) -> String {
        let mut s = String::from("Method      ");
        for f in &self.folds {
            let _ = write!(s, " fold-{f:<3}");
        }
        s.push_str("   Mean\n");
        for (r, (name, _, _)) in ABLATION_ROWS.iter().enumerate() {
            let _ = write!(s, "{name:<12}");
            for v in &self.rows[r] {
                let _ = write!(s, " {v:>8.2}");
            }
            let _ = writeln!(s, " {:>8.2}", self.row_mean(r));
        }
        s
    }
}

/// Train and evaluate the four module combinations for every seed and fold.
pub fn run_ablation(
    cfg: &RunConfig,
    mut progress: impl FnMut(&str, usize, u64, &TrainRun),
) -> Result<AblationTable, CliError> {
    let mut rows = vec![vec![0.0; cfg.folds.len()]; ABLATION_ROWS.len()];
    let mut runs = Vec::new();
    for (r, &(name, sdpm, saam)) in ABLATION_ROWS.iter().enumerate() {
        let model = ModelConfig {
            use_sdpm: sdpm,
            use_saam: saam,
            ..cfg.model.clone()
        };
        for (fi, &fold) in cfg.folds.iter().enumerate() {
            for &seed in &cfg.seeds {
                let mut train_cfg = cfg.train.clone();
                train_cfg.test_fold = fold;
                train_cfg.seed = seed;
                let run = train(&model, &train_cfg, &cfg.data)?;
                let miou = run.final_report().map_or(0.0, |rep| rep.miou) * 100.0;
                progress(name, fold, seed, &run);
                rows[r][fi] += miou / cfg.seeds.len() as f64;
                runs.push((r, fold, seed, miou));
            }
        }
    }
    Ok(AblationTable {
        folds: cfg.folds.clone(),
        seeds: cfg.seeds.clone(),
        rows,
        runs,
    })
}

pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<AblationTable, CliError> {
    ensure_dir(&cfg.out_dir)?;
    let mut logs = String::new();
    let table = run_ablation(cfg, |name, fold, seed, run| {
        for line in &run.log {
            let _ = writeln!(logs, "row={name} fold={fold} seed={seed} {line}");
        }
    })?;
    let rendered = table.render();
    std::fs::write(cfg.out_dir.join(ABLATION_FILE), &rendered).map_err(sdaa_core::Error::from)?;
    std::fs::write(cfg.out_dir.join(METRICS_FILE), &logs).map_err(sdaa_core::Error::from)?;
    write_report(out, &rendered)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub episode_seed: u64,
    pub out_dir: PathBuf,
    pub fold: usize,
    pub k: usize,
    pub strategy: KShotStrategy,
}

pub const EXPORT_FILES: [&str; 3] = ["attention.pgm", "similarity.pgm", "prediction.pgm"];

/// Write the query attention map, the first support's cosine-similarity
/// map and the predicted query mask for one test episode.
pub fn cmd_export(args: &ExportArgs, data: &DataConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    if args.k == 0 {
        return Err(CliError::Config("--k must be positive".into()));
    }
    if args.fold >= sdaa_core::data::NUM_FOLDS {
        return Err(CliError::Config(format!("--fold must be 0..3, got {}", args.fold)));
    }
    let (net, store) = load_model(&args.checkpoint)?;
    ensure_dir(&args.out_dir)?;
    let episode = sample_episode(data, Split::Test, args.fold, args.k, args.episode_seed)?;
    let g = Graph::new();
    let output = net.forward_episode(&g, &store, &episode, Mode::Eval, args.strategy, 0.0, 0.0)?;
    let size = data.image_size;

    let attention = HeatmapImage::render(&g.value(output.attention), Range::Fixed(0.0, 1.0), Some((size, size)))?;

    let support_feature = output.support_features[0];
    let (fh, fw) = {
        let s = g.shape(support_feature);
        (s[2], s[3])
    };
    let mask = sdaa_core::data::downsample_mask(&episode.support[0].mask, fh, fw)?;
    let prototype = masked_gap(&g, support_feature, &mask)?;
    let similarity = cosine_similarity_map(&g.value(support_feature), g.value(prototype.0).data())?;
    let similarity = HeatmapImage::render(&similarity, Range::Fixed(-1.0, 1.0), Some((size, size)))?;

    let predicted = predict_mask(&g.value(output.low_logits), size, size, false)?;
    let prediction = Tensor::new(&[1, 1, size, size], predicted.iter().map(|&f| f32::from(u8::from(f))).collect())?;
    let prediction = HeatmapImage::render(&prediction, Range::Fixed(0.0, 1.0), None)?;

    let mut written = Vec::new();
    for (name, img) in EXPORT_FILES.iter().zip([attention, similarity, prediction]) {
        let path = args.out_dir.join(name);
        img.write(&path)?;
        written.push(path);
    }
    let summary = written.iter().map(|p| format!("wrote {}\n", p.display())).collect::<String>();
    write_report(out, &summary)?;
    Ok(written)
}

pub fn cmd_corpus(data: &DataConfig, out_dir: &Path, per_class: usize, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    data.validate().map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out_dir)?;
    sdaa_core::data::dump_corpus(data, out_dir, per_class, seed)?;
    write_report(out, &format!("wrote {per_class} samples per class to {}\n", out_dir.display()))
}
