//! Implementations of the command-line subcommands. Every command writes
//! `resolved_config.toml` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;

use crate::autodiff::{flush_denormals, Graph, Real, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_manifest, load_png, resize_normalize, save_png, write_synthetic_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::ldwa::DensityWeights;
use crate::metrics::{compute_metrics, evaluate, predict, MetricsReport};
use crate::model::{LabelStats, ModelConfig};
use crate::profiler::{
    count_params, estimate_flops, layer_costs, layer_costs_csv, load_power_log, measure_latency, with_input_size,
    EfficiencyReport, LatencyStats,
};
use crate::train::{epoch_log_csv, train, Precision, TrainOutcome, TrainStatus};
use crate::visualize::{grayscale_map, heatmap_overlay, mean_activation, weights_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serializing report: {e}")))
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>, precision: Option<Precision>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(seed, precision);
    cfg.validate()?;
    Ok(cfg)
}

/// A manifest file, or a directory holding `manifest.txt`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

/// Precision of an existing checkpoint unless overridden.
pub fn checkpoint_precision(path: &Path, flag: Option<Precision>) -> Result<Precision> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::<f32>::scalar_of(&bytes)?.parse()
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let manifest = write_synthetic_dataset(&cfg.synth, out)?;
    cfg.write_resolved(out)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub status: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best_val_rmse: Option<f64>,
    pub train_images: usize,
    pub val_images: usize,
    pub params: u64,
}

pub fn load_split(data: &Path, split: Option<Split>, size: [usize; 2]) -> Result<Dataset> {
    let manifest = load_manifest(&manifest_path(data))?;
    let ds = Dataset::load(&manifest, split, size)?;
    if ds.is_empty() {
        let which = split
            .map(|s| format!("{s:?}").to_lowercase())
            .unwrap_or_else(|| "any".into());
        return Err(Error::Data(format!("{} has no {which}-split images", data.display())));
    }
    Ok(ds)
}

fn fit<T: Real>(
    model: &ModelConfig,
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    verbose: bool,
) -> Result<TrainOutcome<T>> {
    train::<T>(model, &cfg.train, &cfg.loss, train_set, val_set, |log| {
        if verbose {
            eprintln!(
                "epoch {:>3}  l_reg {:.5}  l_cls {:.5}  l_total {:.5}  val_mae {:.3}  val_rmse {:.3}  lr {:.2e}",
                log.epoch, log.l_reg, log.l_cls, log.l_total, log.val_mae, log.val_rmse, log.lr
            );
        }
    })
}

/// Writes the checkpoint and epoch log; returns the summary and a
/// divergence error if training stopped early.
fn save_outcome<T: Real>(outcome: &TrainOutcome<T>, out: &Path, train_n: usize, val_n: usize) -> Result<TrainSummary> {
    let ckpt = &outcome.checkpoint;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(TRAIN_LOG_FILE), epoch_log_csv(&ckpt.history))?;
    let best = ckpt.epoch.checked_sub(1).and_then(|i| ckpt.history.get(i));
    Ok(TrainSummary {
        status: match &outcome.status {
            TrainStatus::Completed => "completed".into(),
            TrainStatus::Diverged { epoch, detail } => format!("diverged at epoch {epoch}: {detail}"),
        },
        epochs_run: ckpt.history.len(),
        best_epoch: ckpt.epoch,
        best_val_mae: best.map(|b| b.val_mae),
        best_val_rmse: best.map(|b| b.val_rmse),
        train_images: train_n,
        val_images: val_n,
        params: count_params(&ckpt.params),
    })
}

fn divergence(status: &TrainStatus) -> Result<()> {
    match status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { epoch, detail } => Err(Error::Diverged {
            epoch: *epoch,
            detail: detail.clone(),
        }),
    }
}

/// Trains on the train split, selecting on the val split. Outputs are
/// written even when training diverges, which is then reported as an error.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> Result<TrainSummary> {
    let size = cfg.backbone.input_size;
    let train_set = load_split(data, Some(Split::Train), size)?;
    let val_set = load_split(data, Some(Split::Val), size)?;
    let model = cfg.model();
    cfg.write_resolved(out)?;
    let (summary, status) = match cfg.train.precision {
        Precision::F32 => {
            let o = fit::<f32>(&model, cfg, &train_set, &val_set, verbose)?;
            (save_outcome(&o, out, train_set.len(), val_set.len())?, o.status)
        }
        Precision::F64 => {
            let o = fit::<f64>(&model, cfg, &train_set, &val_set, verbose)?;
            (save_outcome(&o, out, train_set.len(), val_set.len())?, o.status)
        }
    };
    write(&out.join("train_summary.toml"), to_toml(&summary)?)?;
    divergence(&status)?;
    Ok(summary)
}

/// Base config with the checkpoint's model, training and loss settings.
fn config_for<T: Real>(base: &RunConfig, ckpt: &Checkpoint<T>) -> RunConfig {
    let mut cfg = base.clone();
    cfg.set_model(&ckpt.model);
    cfg.train = ckpt.train.clone();
    cfg.train.precision = if T::NAME == "f64" {
        Precision::F64
    } else {
        Precision::F32
    };
    cfg.loss = ckpt.loss.clone();
    cfg
}

fn eval_with<T: Real>(
    base: &RunConfig,
    ckpt_path: &Path,
    data: &Path,
    split: Option<Split>,
    out: &Path,
) -> Result<MetricsReport> {
    flush_denormals();
    let ckpt = Checkpoint::<T>::load(ckpt_path)?;
    config_for(base, &ckpt).write_resolved(out)?;
    let model = ckpt.counter()?;
    let ds = load_split(data, split, ckpt.model.backbone.input_size)?;
    let preds = predict(&model, &ckpt.params, &ckpt.stats, &ds, ckpt.train.eval_batch_size)?;
    let report = compute_metrics(&preds, &ds.counts())?;
    let mut csv = String::from("id,count,predicted\n");
    for (s, p) in ds.samples.iter().zip(&preds) {
        let _ = writeln!(csv, "{},{},{}", s.id, s.count, p.max(0.0));
    }
    write(&out.join("predictions.csv"), csv)?;
    write(&out.join("metrics.toml"), to_toml(&report)?)?;
    Ok(report)
}

/// MAE/RMSE of a checkpoint on one split (`None` = every image).
pub fn cmd_eval(
    base: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Option<Split>,
    precision: Option<Precision>,
    out: &Path,
) -> Result<MetricsReport> {
    match checkpoint_precision(checkpoint, precision)? {
        Precision::F32 => eval_with::<f32>(base, checkpoint, data, split, out),
        Precision::F64 => eval_with::<f64>(base, checkpoint, data, split, out),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    DcHead,
    DcHeadLdwa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::DcHead, Variant::DcHeadLdwa];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DcHead => "+dc_head",
            Variant::DcHeadLdwa => "+dc_head+ldwa",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut cfg = cfg.clone();
        cfg.ablation.use_cls_head = self != Variant::Baseline;
        cfg.ablation.use_ldwa = self == Variant::DcHeadLdwa;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub params: u64,
    pub delta_mae: f64,
    pub delta_params: i64,
}

fn train_variant<T: Real>(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
    verbose: bool,
) -> Result<(MetricsReport, u64)> {
    let o = fit::<T>(&cfg.model(), cfg, train_set, val_set, verbose)?;
    save_outcome(&o, out, train_set.len(), val_set.len())?;
    cfg.write_resolved(out)?;
    divergence(&o.status)?;
    let ckpt = &o.checkpoint;
    let report = evaluate(
        &ckpt.counter()?,
        &ckpt.params,
        &ckpt.stats,
        val_set,
        cfg.train.eval_batch_size,
    )?;
    Ok((report, count_params(&ckpt.params)))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,mae,rmse,params,delta_mae_vs_baseline,delta_params_vs_baseline\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{:.6},{}",
            r.variant.name(),
            r.seed,
            r.mae,
            r.rmse,
            r.params,
            r.delta_mae,
            r.delta_params
        );
    }
    s
}

/// Trains the three ablation variants for every seed and reports val-split
/// metrics with deltas against the same-seed baseline.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, seeds: &[u64], out: &Path, verbose: bool) -> Result<Vec<AblationRow>> {
    let size = cfg.backbone.input_size;
    let train_set = load_split(data, Some(Split::Train), size)?;
    let val_set = load_split(data, Some(Split::Val), size)?;
    cfg.write_resolved(out)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut baseline: Option<(f64, u64)> = None;
        for variant in Variant::ALL {
            let mut vcfg = variant.apply(cfg);
            vcfg.train.seed = seed;
            let dir = out
                .join(format!("seed{seed}"))
                .join(variant.name().trim_start_matches('+'));
            if verbose {
                eprintln!("ablate: seed {seed}, variant {}", variant.name());
            }
            let (report, params) = match vcfg.train.precision {
                Precision::F32 => train_variant::<f32>(&vcfg, &train_set, &val_set, &dir, verbose)?,
                Precision::F64 => train_variant::<f64>(&vcfg, &train_set, &val_set, &dir, verbose)?,
            };
            let (b_mae, b_params) = *baseline.get_or_insert((report.mae, params));
            rows.push(AblationRow {
                variant,
                seed,
                mae: report.mae,
                rmse: report.rmse,
                params,
                delta_mae: report.mae - b_mae,
                delta_params: params as i64 - b_params as i64,
            });
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct BenchOptions {
    pub checkpoint: Option<PathBuf>,
    pub input_size: Option<[usize; 2]>,
    pub warmup: usize,
    pub reps: usize,
    pub power_w: Option<f64>,
    pub power_log: Option<PathBuf>,
    /// Skips timing and uses this single-image latency.
    pub latency_ms: Option<f64>,
}

fn bench_with<T: Real>(base: &RunConfig, opts: &BenchOptions, out: &Path) -> Result<EfficiencyReport> {
    let ckpt = match &opts.checkpoint {
        Some(p) => Checkpoint::<T>::load(p)?,
        None => Checkpoint::<T>::fresh(&base.model(), &base.train, &base.loss, LabelStats::from_counts(&[0.0])?)?,
    };
    config_for(base, &ckpt).write_resolved(out)?;
    let size = opts.input_size.unwrap_or(ckpt.model.backbone.input_size);
    with_input_size(&ckpt.model, size).validate()?;
    let flops = estimate_flops(&ckpt.model, size)?;
    let latency = match opts.latency_ms {
        Some(ms) => LatencyStats::from_durations_ms(&[ms])?,
        None => measure_latency(&ckpt, size, opts.warmup, opts.reps)?,
    };
    let power = match (&opts.power_log, opts.power_w) {
        (Some(log), _) => Some(load_power_log(log)?),
        (None, p) => p,
    };
    let warmup = if opts.latency_ms.is_some() { 0 } else { opts.warmup };
    let report = EfficiencyReport::new(count_params(&ckpt.params), flops, size, warmup, latency, power)?;
    write(&out.join("bench.txt"), report.to_text())?;
    write(&out.join("bench.csv"), report.to_csv())?;
    write(
        &out.join("layers.csv"),
        layer_costs_csv(&layer_costs(&with_input_size(&ckpt.model, size))?),
    )?;
    Ok(report)
}

/// Parameters, FLOPs, latency and optional energy of a checkpoint, or of a
/// freshly initialized model from the config when none is given.
pub fn cmd_bench(
    base: &RunConfig,
    opts: &BenchOptions,
    precision: Option<Precision>,
    out: &Path,
) -> Result<EfficiencyReport> {
    let precision = match &opts.checkpoint {
        Some(p) => checkpoint_precision(p, precision)?,
        None => precision.unwrap_or(base.train.precision),
    };
    match precision {
        Precision::F32 => bench_with::<f32>(base, opts, out),
        Precision::F64 => bench_with::<f64>(base, opts, out),
    }
}

/// In-memory result of running the model on one image.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub predicted_count: f64,
    pub weights: DensityWeights,
    /// Channel-mean activation grids of the two MBConv stages.
    pub stage_maps: Vec<(Vec<f64>, (usize, usize))>,
    pub resized: bool,
}

/// Runs one image through a checkpoint, resizing it to the model input.
pub fn inspect_image<T: Real>(ckpt: &Checkpoint<T>, img: &RgbImage) -> Result<Inspection> {
    let size = ckpt.model.backbone.input_size;
    let resized = (img.height() as usize, img.width() as usize) != (size[0], size[1]);
    let data: Vec<T> = resize_normalize(img, size)?.iter().map(|&v| T::c(v as f64)).collect();
    let model = ckpt.counter()?;
    let mut g = Graph::new();
    let p = ckpt.params.bind(&mut g, false);
    let x = g.constant(Tensor::new(&[1, 3, size[0], size[1]], data)?);
    let fwd = model.forward(&mut g, &p, x)?;
    let weights = model.density_weights(&g, &fwd)?.remove(0);
    let stage_maps = fwd.pyramid.stages[..2]
        .iter()
        .map(|&s| mean_activation(&g, s))
        .collect::<Result<_>>()?;
    Ok(Inspection {
        predicted_count: model.counts(&g, &fwd, &ckpt.stats)[0].max(0.0),
        weights,
        stage_maps,
        resized,
    })
}

#[derive(Serialize)]
struct InspectSummary {
    image: String,
    predicted_count: f64,
    grid: [usize; 2],
    argmax_row: usize,
    argmax_col: usize,
    resized: bool,
}

fn inspect_with<T: Real>(base: &RunConfig, ckpt_path: &Path, image: &Path, out: &Path) -> Result<Inspection> {
    flush_denormals();
    let ckpt = Checkpoint::<T>::load(ckpt_path)?;
    config_for(base, &ckpt).write_resolved(out)?;
    let img = load_png(image)?;
    let ins = inspect_image(&ckpt, &img)?;
    if ins.resized {
        let [h, w] = ckpt.model.backbone.input_size;
        eprintln!(
            "warning: {} is {}x{}, resized to the model input {h}x{w}",
            image.display(),
            img.height(),
            img.width()
        );
    }
    let (ih, iw) = (img.height() as usize, img.width() as usize);
    write(&out.join("density_weights.csv"), weights_csv(&ins.weights))?;
    save_png(&heatmap_overlay(&img, &ins.weights, 0.5), &out.join("ldwa_heatmap.png"))?;
    for (i, (grid, shape)) in ins.stage_maps.iter().enumerate() {
        save_png(
            &grayscale_map(grid, *shape, (ih, iw)),
            &out.join(format!("stage{}_mean_activation.png", i + 1)),
        )?;
    }
    let (argmax_row, argmax_col) = ins.weights.argmax();
    let summary = InspectSummary {
        image: image.display().to_string(),
        predicted_count: ins.predicted_count,
        grid: [ins.weights.source_shape.0, ins.weights.source_shape.1],
        argmax_row,
        argmax_col,
        resized: ins.resized,
    };
    write(&out.join("inspect.toml"), to_toml(&summary)?)?;
    Ok(ins)
}

/// Writes the pooling-weight heatmap, the weight grid as CSV and the MBConv
/// stage activation maps for one image.
pub fn cmd_inspect(
    base: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    precision: Option<Precision>,
    out: &Path,
) -> Result<Inspection> {
    match checkpoint_precision(checkpoint, precision)? {
        Precision::F32 => inspect_with::<f32>(base, checkpoint, image, out),
        Precision::F64 => inspect_with::<f64>(base, checkpoint, image, out),
    }
}
