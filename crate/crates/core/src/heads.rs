//! Count regression, density-level quantization, the decoupled density
//! classifier and the training losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Linear count head: `y = W_reg · T_count + b_reg`.
#[derive(Clone, Copy, Debug)]
pub struct RegressionHead {
    /// (1, d).
    pub w: ParamId,
    /// (1,).
    pub b: ParamId,
}

impl RegressionHead {
    pub fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut Rng, dim: usize) -> Self {
        RegressionHead {
            w: p.weight(rng, "reg.weight", &[1, dim]),
            b: p.zeros("reg.bias", &[1]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, t_count: Var) -> Result<Var> {
        regress_count(g, t_count, p[self.w], p[self.b])
    }
}

/// Feature (B, d) → counts (B,). Unclamped; may be negative.
pub fn regress_count<T: Real>(g: &mut Graph<T>, t_count: Var, w: Var, b: Var) -> Result<Var> {
    let (batch, d) = match *g.shape(t_count) {
        [batch, d] => (batch, d),
        ref s => {
            return Err(Error::shape(
                "regress_count",
                format!("feature must be (B, d), got {s:?}"),
            ))
        }
    };
    if g.shape(w) != [1, d] {
        return Err(Error::shape(
            "regress_count",
            format!("head {:?} for feature dim {d}", g.shape(w)),
        ));
    }
    let y = g.linear(t_count, w, Some(b))?;
    g.reshape(y, &[batch])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityLevelConfig {
    /// Number of levels K.
    pub levels: usize,
    /// Largest count of the training split.
    pub c_max: f64,
}

impl DensityLevelConfig {
    pub fn new(levels: usize, c_max: f64) -> Result<Self> {
        let cfg = Self { levels, c_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "density levels must be >= 2, got {}",
                self.levels
            )));
        }
        if !(self.c_max.is_finite() && self.c_max > 0.0) {
            return Err(Error::Config(format!("c_max must be positive, got {}", self.c_max)));
        }
        Ok(())
    }
}

/// `min(floor(K · min(c, c_max) / c_max), K − 1)`.
pub fn quantize_density_level(c: f64, cfg: &DensityLevelConfig) -> Result<usize> {
    cfg.validate()?;
    if c.is_nan() || c < 0.0 {
        return Err(Error::invalid(
            "quantize_density_level",
            format!("count must be >= 0, got {c}"),
        ));
    }
    let k = cfg.levels as f64;
    let raw = (k * c.min(cfg.c_max) / cfg.c_max).floor() as usize;
    Ok(raw.min(cfg.levels - 1))
}

/// Which feature the classification head projects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsInput {
    /// The head's own learnable token; image-independent.
    #[default]
    DensityToken,
    /// The pooled image feature shared with the regression head.
    CountFeature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    /// Cross-entropy of the K-way softmax against one-hot levels.
    #[default]
    Categorical,
    /// Independent binary cross-entropy per class on the softmax outputs.
    PerClassBce,
}

/// Density-token classifier: `softmax(W_cls · x + b_cls)`.
#[derive(Clone, Copy, Debug)]
pub struct ClassificationHead {
    /// (1, d), zero-initialized.
    pub token: ParamId,
    /// (K, d).
    pub w: ParamId,
    /// (K,).
    pub b: ParamId,
}

impl ClassificationHead {
    pub fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut Rng, dim: usize, levels: usize) -> Self {
        ClassificationHead {
            token: p.zeros("cls.density_token", &[1, dim]),
            w: p.weight(rng, "cls.weight", &[levels, dim]),
            b: p.zeros("cls.bias", &[levels]),
        }
    }

    /// Probabilities (1, K) computed from the density token alone.
    pub fn forward_token<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        classify_density(g, p[self.token], p[self.w], p[self.b])
    }
}

/// Input (R, d) → probabilities (R, K).
pub fn classify_density<T: Real>(g: &mut Graph<T>, input: Var, w: Var, b: Var) -> Result<Var> {
    let d = match *g.shape(input) {
        [_, d] => d,
        ref s => {
            return Err(Error::shape(
                "classify_density",
                format!("input must be (R, d), got {s:?}"),
            ))
        }
    };
    match *g.shape(w) {
        [_, wd] if wd == d => {}
        ref s => {
            return Err(Error::shape(
                "classify_density",
                format!("weights {s:?} for input dim {d}"),
            ))
        }
    }
    let logits = g.linear(input, w, Some(b))?;
    g.softmax(logits, 1)
}

/// Mean smooth L1 over the batch, threshold 1.
pub fn smooth_l1_loss<T: Real>(g: &mut Graph<T>, preds: Var, targets: &[f64]) -> Result<Var> {
    let n = g.value(preds).numel();
    if targets.is_empty() {
        return Err(Error::invalid("smooth_l1_loss", "empty batch"));
    }
    if n != targets.len() {
        return Err(Error::shape(
            "smooth_l1_loss",
            format!("{n} predictions for {} targets", targets.len()),
        ));
    }
    let shape = g.shape(preds).to_vec();
    let t = g.constant(Tensor::from_f64(&shape, targets)?);
    let d = g.sub(preds, t)?;
    let h = g.huber(d)?;
    g.mean_all(h)
}

/// Classification loss averaged over the batch.
///
/// `y_cls` is either (B, K), one row per sample, or (1, K) when every
/// sample shares the same image-independent prediction.
pub fn density_cls_loss<T: Real>(g: &mut Graph<T>, y_cls: Var, levels: &[usize], mode: ClsLoss) -> Result<Var> {
    let (rows, k) = match *g.shape(y_cls) {
        [r, k] => (r, k),
        ref s => {
            return Err(Error::shape(
                "density_cls_loss",
                format!("y_cls must be (R, K), got {s:?}"),
            ))
        }
    };
    let batch = levels.len();
    if batch == 0 {
        return Err(Error::invalid("density_cls_loss", "empty batch"));
    }
    if rows != 1 && rows != batch {
        return Err(Error::shape(
            "density_cls_loss",
            format!("{rows} prediction rows for {batch} levels"),
        ));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "density_cls_loss",
            format!("level {bad} outside 0..{k}"),
        ));
    }
    // Target mass per (row, class); a shared row accumulates the histogram.
    let mut pos = vec![0.0; rows * k];
    for (i, &l) in levels.iter().enumerate() {
        let r = if rows == 1 { 0 } else { i };
        pos[r * k + l] += 1.0;
    }
    let log_y = g.log(y_cls)?;
    let pos_t = g.constant(Tensor::from_f64(&[rows, k], &pos)?);
    let mut acc = g.mul(log_y, pos_t)?;
    acc = g.sum_all(acc)?;
    if mode == ClsLoss::PerClassBce {
        let per_row = if rows == 1 { batch as f64 } else { 1.0 };
        let neg: Vec<f64> = pos.iter().map(|p| per_row - p).collect();
        let flipped = g.scalar_mul(y_cls, -T::one())?;
        let one = g.constant(Tensor::scalar(T::one()));
        let comp = g.add(flipped, one)?;
        let log_comp = g.log(comp)?;
        let neg_t = g.constant(Tensor::from_f64(&[rows, k], &neg)?);
        let neg_terms = g.mul(log_comp, neg_t)?;
        let neg_sum = g.sum_all(neg_terms)?;
        acc = g.add(acc, neg_sum)?;
    }
    g.scalar_mul(acc, T::c(-1.0 / batch as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub cls_loss: ClsLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            cls_loss: ClsLoss::Categorical,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `l_reg + λ · l_cls`; without a classification term this is `l_reg`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, l_reg: Var, l_cls: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match l_cls {
        Some(l_cls) if cfg.lambda != 0.0 => {
            let weighted = g.scalar_mul(l_cls, T::c(cfg.lambda))?;
            g.add(l_reg, weighted)
        }
        _ => Ok(l_reg),
    }
}
