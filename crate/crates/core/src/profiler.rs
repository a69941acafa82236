//! Parameter counts, analytic FLOPs, latency statistics and energy per image.
//!
//! FLOPs convention: one multiply-accumulate is two FLOPs. Convolutions cost
//! `2·k²·C_in·C_out·H_out·W_out/groups`, dense layers `2·d_in·d_out` per
//! token, windowed attention `2·N_w²·d` for the scores plus `2·N_w²·d` for
//! the value mix per window. Bias adds, normalization, activations, softmax,
//! score scaling and residual adds cost one FLOP per output element. Reshapes,
//! transposes and window partitioning are free. Counts are for one image.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{flush_denormals, Graph, Real, Tensor};
use crate::backbone::{effective_window, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{CrowdCounter, ModelConfig};
use crate::params::ParamStore;

pub const FLOPS_CONVENTION: &str = "FLOPs count one multiply-accumulate as 2 operations";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    Attention,
    Norm,
    Activation,
    Softmax,
    Elementwise,
    Pool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
}

/// Multiply-accumulate FLOPs of a 2-D convolution, bias excluded.
pub fn conv2d_flops(k: u64, c_in: u64, c_out: u64, h_out: u64, w_out: u64, groups: u64) -> u64 {
    2 * k * k * c_in * c_out * h_out * w_out / groups
}

/// FLOPs of one dense layer applied to one token; the bias adds `d_out`.
pub fn linear_flops(d_in: u64, d_out: u64, bias: bool) -> u64 {
    2 * d_in * d_out + if bias { d_out } else { 0 }
}

/// Score and value-mix FLOPs of attention over one window of `n` tokens of width `d`.
pub fn window_attention_flops(n: u64, d: u64) -> u64 {
    2 * n * n * d + 2 * n * n * d
}

/// Output extent of the 3×3/pad-1 and 1×1/pad-0 convolutions used here.
fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

struct Walk {
    layers: Vec<LayerCost>,
}

impl Walk {
    fn push(&mut self, name: String, kind: LayerKind, params: usize, flops: u64) {
        self.layers.push(LayerCost {
            name,
            kind,
            params: params as u64,
            flops,
        });
    }

    /// Convolution with bias; `k` 3 uses padding 1, `k` 1 padding 0.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, k: usize, c_in: usize, c_out: usize, groups: usize, h_out: usize, w_out: usize) {
        let area = (h_out * w_out) as u64;
        let flops = conv2d_flops(
            k as u64,
            c_in as u64,
            c_out as u64,
            h_out as u64,
            w_out as u64,
            groups as u64,
        ) + c_out as u64 * area;
        self.push(name, LayerKind::Conv, c_out * (c_in / groups) * k * k + c_out, flops);
    }

    fn dense(&mut self, name: String, d_in: usize, d_out: usize, tokens: usize) {
        self.push(
            name,
            LayerKind::Linear,
            d_in * d_out + d_out,
            tokens as u64 * linear_flops(d_in as u64, d_out as u64, true),
        );
    }

    fn unit(&mut self, name: String, kind: LayerKind, elements: usize) {
        self.push(name, kind, 0, elements as u64);
    }

    fn norm(&mut self, name: String, d: usize, tokens: usize) {
        self.push(name, LayerKind::Norm, 2 * d, (d * tokens) as u64);
    }

    /// Mirrors the MBConv block: expand, GELU, depthwise, GELU, project, residual.
    #[allow(clippy::too_many_arguments)]
    fn mbconv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        expand: usize,
        stride: usize,
        h: usize,
        w: usize,
    ) -> (usize, usize) {
        let hidden = c_in * expand;
        let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
        self.conv(format!("{name}.expand"), 1, c_in, hidden, 1, h, w);
        self.unit(format!("{name}.expand.gelu"), LayerKind::Activation, hidden * h * w);
        self.conv(format!("{name}.depthwise"), 3, hidden, hidden, hidden, ho, wo);
        self.unit(
            format!("{name}.depthwise.gelu"),
            LayerKind::Activation,
            hidden * ho * wo,
        );
        self.conv(format!("{name}.project"), 1, hidden, c_out, 1, ho, wo);
        if stride == 1 && c_in == c_out {
            self.unit(format!("{name}.residual"), LayerKind::Elementwise, c_out * ho * wo);
        }
        (ho, wo)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(&mut self, name: &str, d: usize, heads: usize, window: usize, mlp: usize, h: usize, w: usize) {
        let tokens = h * w;
        let ws = effective_window(window, h, w);
        let nw = ws * ws;
        let windows = tokens / nw;
        self.norm(format!("{name}.norm1"), d, tokens);
        self.dense(format!("{name}.qkv"), d, 3 * d, tokens);
        let scores = windows * heads * nw * nw;
        self.push(
            format!("{name}.attention"),
            LayerKind::Attention,
            0,
            windows as u64 * window_attention_flops(nw as u64, d as u64),
        );
        self.unit(format!("{name}.attention.scale"), LayerKind::Elementwise, scores);
        self.unit(format!("{name}.attention.softmax"), LayerKind::Softmax, scores);
        self.dense(format!("{name}.proj"), d, d, tokens);
        self.unit(format!("{name}.attention.residual"), LayerKind::Elementwise, d * tokens);
        self.norm(format!("{name}.norm2"), d, tokens);
        self.dense(format!("{name}.fc1"), d, d * mlp, tokens);
        self.unit(format!("{name}.fc1.gelu"), LayerKind::Activation, d * mlp * tokens);
        self.dense(format!("{name}.fc2"), d * mlp, d, tokens);
        self.unit(format!("{name}.mlp.residual"), LayerKind::Elementwise, d * tokens);
    }

    fn backbone(&mut self, cfg: &BackboneConfig) {
        let ch = cfg.channels;
        let stem_c = cfg.stem_channels();
        let [mut h, mut w] = cfg.input_size;
        let mut c_in = 3;
        for (i, c_out) in [stem_c, ch[0]].into_iter().enumerate() {
            h = conv_out(h, 2);
            w = conv_out(w, 2);
            let name = format!("stem.conv{}", i + 1);
            self.conv(name.clone(), 3, c_in, c_out, 1, h, w);
            self.unit(format!("{name}.gelu"), LayerKind::Activation, c_out * h * w);
            c_in = c_out;
        }
        for s in 0..4 {
            let stage = format!("stage{}", s + 1);
            if s > 0 {
                (h, w) = self.mbconv(
                    &format!("{stage}.downsample"),
                    ch[s - 1],
                    ch[s],
                    cfg.expand_ratio,
                    2,
                    h,
                    w,
                );
            }
            for b in 0..cfg.blocks_per_stage[s] {
                let name = format!("{stage}.block{b}");
                if s < 2 {
                    self.mbconv(&name, ch[s], ch[s], cfg.expand_ratio, 1, h, w);
                } else {
                    self.attention_block(
                        &name,
                        ch[s],
                        cfg.attention_heads[s - 2],
                        cfg.window,
                        cfg.mlp_ratio,
                        h,
                        w,
                    );
                }
            }
        }
        self.norm("stage4.norm".into(), ch[3], h * w);
    }
}

/// Independent per-layer walk over a model configuration at its input size.
pub fn layer_costs(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let mut walk = Walk { layers: Vec::new() };
    walk.backbone(&cfg.backbone);
    let d = cfg.token_dim();
    let (h, w) = cfg.backbone.stage_extent(4);
    let n = h * w;
    if cfg.use_ldwa {
        walk.push(
            "ldwa.score".into(),
            LayerKind::Linear,
            d + 1,
            n as u64 * linear_flops(d as u64, 1, true),
        );
        walk.unit("ldwa.softmax".into(), LayerKind::Softmax, n);
        walk.push("ldwa.aggregate".into(), LayerKind::Pool, 0, 2 * (n * d) as u64);
    } else {
        walk.push("gap".into(), LayerKind::Pool, 0, (n * d + d) as u64);
    }
    walk.dense("reg".into(), d, 1, 1);
    if cfg.use_cls_head {
        let k = cfg.levels;
        walk.dense("cls".into(), d, k, 1);
        walk.unit("cls.softmax".into(), LayerKind::Softmax, k);
        // The token is declared under either input mode.
        walk.push("cls.density_token".into(), LayerKind::Linear, d, 0);
    }
    Ok(walk.layers)
}

/// Total FLOPs for one image of `input_size` (height, width).
pub fn estimate_flops(cfg: &ModelConfig, input_size: [usize; 2]) -> Result<u64> {
    let cfg = with_input_size(cfg, input_size);
    Ok(layer_costs(&cfg)?.iter().map(|l| l.flops).sum())
}

/// Parameter total from the analytic walk.
pub fn analytic_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(layer_costs(cfg)?.iter().map(|l| l.params).sum())
}

/// Exact number of learnable scalars.
pub fn count_params<T: Real>(params: &ParamStore<T>) -> u64 {
    params.scalar_count() as u64
}

pub fn with_input_size(cfg: &ModelConfig, input_size: [usize; 2]) -> ModelConfig {
    let mut cfg = cfg.clone();
    cfg.backbone.input_size = input_size;
    cfg
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Nearest-rank median.
    pub p50_ms: f64,
    pub reps: usize,
}

impl LatencyStats {
    pub fn from_durations_ms(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("latency", "need at least one timed repetition"));
        }
        if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("latency", "durations must be finite and non-negative"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        Ok(LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
            p50_ms: sorted[n.div_ceil(2) - 1],
            reps: n,
        })
    }
}

/// Runs `f` `warmup` times untimed, then `reps` timed times.
pub fn time_repetitions(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::invalid("measure_latency", "reps must be at least 1"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_durations_ms(&samples)
}

/// Single-image forward latency on the calling thread. Parameters do not
/// depend on the spatial size, so any multiple of 32 may be timed.
pub fn measure_latency<T: Real>(
    ckpt: &Checkpoint<T>,
    input_size: [usize; 2],
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats> {
    flush_denormals();
    let cfg = with_input_size(&ckpt.model, input_size);
    let model = CrowdCounter::for_params(&cfg, &ckpt.params)?;
    let image = Tensor::<T>::zeros(&[1, 3, input_size[0], input_size[1]]);
    time_repetitions(warmup, reps, || {
        let mut g = Graph::new();
        let p = ckpt.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        model.forward(&mut g, &p, x)?;
        Ok(())
    })
}

/// Joules per image: average power times single-image latency.
pub fn energy_per_image(avg_power_watts: f64, latency_seconds: f64) -> Result<f64> {
    if !(avg_power_watts > 0.0 && avg_power_watts.is_finite()) {
        return Err(Error::invalid(
            "energy_per_image",
            format!("power {avg_power_watts} W must be positive"),
        ));
    }
    if !(latency_seconds > 0.0 && latency_seconds.is_finite()) {
        return Err(Error::invalid(
            "energy_per_image",
            format!("latency {latency_seconds} s must be positive"),
        ));
    }
    Ok(avg_power_watts * latency_seconds)
}

/// Mean of the `power_w` column of a `timestamp_s,power_w` log. A header
/// line, blank lines and `#` comments are skipped.
pub fn parse_power_log(text: &str, origin: &Path) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("timestamp")) {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(format!("expected 2 fields, got {}", fields.len())));
        }
        fields[0]
            .parse::<f64>()
            .map_err(|_| parse_err(format!("bad timestamp {:?}", fields[0])))?;
        let p: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad power {:?}", fields[1])))?;
        if !(p >= 0.0 && p.is_finite()) {
            return Err(parse_err(format!("power {p} must be non-negative")));
        }
        sum += p;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{}: power log has no samples", origin.display())));
    }
    Ok(sum / n as f64)
}

pub fn load_power_log(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_power_log(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params: u64,
    pub flops: u64,
    pub input_size: [usize; 2],
    pub warmup: usize,
    pub latency: LatencyStats,
    pub power_w: Option<f64>,
    pub energy_j_per_image: Option<f64>,
}

impl EfficiencyReport {
    /// Energy uses the mean latency when a power figure is given.
    pub fn new(
        params: u64,
        flops: u64,
        input_size: [usize; 2],
        warmup: usize,
        latency: LatencyStats,
        power_w: Option<f64>,
    ) -> Result<Self> {
        let energy = power_w
            .map(|p| energy_per_image(p, latency.mean_ms / 1e3))
            .transpose()?;
        Ok(EfficiencyReport {
            params,
            flops,
            input_size,
            warmup,
            latency,
            power_w,
            energy_j_per_image: energy,
        })
    }

    pub fn to_text(&self) -> String {
        let l = &self.latency;
        let mut s = String::new();
        let _ = writeln!(s, "# {FLOPS_CONVENTION}");
        let _ = writeln!(s, "input        {}x{}", self.input_size[0], self.input_size[1]);
        let _ = writeln!(s, "params       {} ({:.3} M)", self.params, self.params as f64 / 1e6);
        let _ = writeln!(s, "flops        {} ({:.4} G)", self.flops, self.flops as f64 / 1e9);
        let _ = writeln!(
            s,
            "latency_ms   mean {:.3}  min {:.3}  max {:.3}  p50 {:.3}  ({} reps, {} warmup)",
            l.mean_ms, l.min_ms, l.max_ms, l.p50_ms, l.reps, self.warmup
        );
        if let (Some(p), Some(e)) = (self.power_w, self.energy_j_per_image) {
            let _ = writeln!(s, "power_w      {p:.2}");
            let _ = writeln!(s, "energy_j     {e:.2}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let l = &self.latency;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
        format!(
            "# {FLOPS_CONVENTION}\n\
             params,flops,input_h,input_w,latency_mean_ms,latency_min_ms,latency_max_ms,latency_p50_ms,reps,warmup,power_w,energy_j\n\
             {},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            self.params,
            self.flops,
            self.input_size[0],
            self.input_size[1],
            l.mean_ms,
            l.min_ms,
            l.max_ms,
            l.p50_ms,
            l.reps,
            self.warmup,
            opt(self.power_w),
            opt(self.energy_j_per_image),
        )
    }
}

/// Per-layer table as CSV.
pub fn layer_costs_csv(layers: &[LayerCost]) -> String {
    let mut s = format!("# {FLOPS_CONVENTION}\nlayer,kind,params,flops\n");
    for l in layers {
        let kind = format!("{:?}", l.kind).to_lowercase();
        let _ = writeln!(s, "{},{kind},{},{}", l.name, l.params, l.flops);
    }
    s
}
