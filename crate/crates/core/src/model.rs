//! The full counter: backbone, pooling (LDWA or global average), regression
//! head and the optional decoupled density classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{derived_rng, Graph, Real, Var};
use crate::backbone::{Backbone, BackboneConfig, TokenPyramid};
use crate::error::{Error, Result};
use crate::heads::{
    classify_density, density_cls_loss, quantize_density_level, smooth_l1_loss, total_loss, ClassificationHead,
    ClsInput, DensityLevelConfig, LossConfig, RegressionHead,
};
use crate::ldwa::{global_average_pool, DensityWeights, LdwaParams};
use crate::params::{Bound, ParamStore};

/// RNG stream tag for parameter initialization.
pub const INIT_STREAM: u64 = 0;

/// How ground-truth counts map to regression targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountNorm {
    /// The head regresses raw counts.
    Identity,
    /// The head regresses `(c − mean) / std` of the training split.
    #[default]
    Standardize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Density levels K.
    pub levels: usize,
    pub use_ldwa: bool,
    pub use_cls_head: bool,
    pub cls_input: ClsInput,
    pub count_norm: CountNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            levels: 10,
            use_ldwa: true,
            use_cls_head: true,
            cls_input: ClsInput::DensityToken,
            count_norm: CountNorm::Standardize,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "density levels must be >= 2, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Final-stage token width d.
    pub fn token_dim(&self) -> usize {
        self.backbone.channels[3]
    }
}

/// Training-split count statistics a model is tied to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelStats {
    pub c_max: f64,
    pub mean: f64,
    pub std: f64,
}

impl LabelStats {
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Data("no counts to summarize".into()));
        }
        if let Some(c) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::Data(format!("invalid count {c}")));
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        let c_max = counts.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            c_max,
            mean,
            std: var.sqrt(),
        })
    }

    /// `(offset, scale)` of the count ↔ target map.
    pub fn affine(&self, norm: CountNorm) -> (f64, f64) {
        match norm {
            CountNorm::Identity => (0.0, 1.0),
            // Degenerate splits (all counts equal) fall back to unit scale.
            CountNorm::Standardize => (self.mean, if self.std > 1e-12 { self.std } else { 1.0 }),
        }
    }

    pub fn to_target(&self, norm: CountNorm, c: f64) -> f64 {
        let (o, s) = self.affine(norm);
        (c - o) / s
    }

    pub fn to_count(&self, norm: CountNorm, y: f64) -> f64 {
        let (o, s) = self.affine(norm);
        o + s * y
    }

    /// Quantization config; a split with only zero counts uses `c_max = 1`.
    pub fn density_levels(&self, levels: usize) -> Result<DensityLevelConfig> {
        DensityLevelConfig::new(levels, if self.c_max > 0.0 { self.c_max } else { 1.0 })
    }
}

/// Parameter layout of a counter. Values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CrowdCounter {
    config: ModelConfig,
    backbone: Backbone,
    ldwa: Option<LdwaParams>,
    reg: RegressionHead,
    cls: Option<ClassificationHead>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pyramid: TokenPyramid,
    /// Final-stage tokens (B, N, d).
    pub tokens: Var,
    /// LDWA weights (B, N); `None` under global average pooling.
    pub weights: Option<Var>,
    /// Pooled feature (B, d).
    pub t_count: Var,
    /// Regression output (B,) in target units.
    pub y_reg: Var,
    /// Class probabilities, (1, K) from the density token or (B, K).
    pub y_cls: Option<Var>,
    /// Final-stage grid (h, w).
    pub grid: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_reg: Var,
    pub l_cls: Option<Var>,
    pub total: Var,
}

impl CrowdCounter {
    /// Declares all parameters in checkpoint order, drawing initial values
    /// from `seed`.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = derived_rng(seed, INIT_STREAM);
        let mut p = ParamStore::new();
        let d = config.token_dim();
        let backbone = Backbone::new(&config.backbone, &mut p, &mut rng)?;
        let ldwa = config.use_ldwa.then(|| LdwaParams::new(&mut p, &mut rng, d));
        let reg = RegressionHead::new(&mut p, &mut rng, d);
        let cls = config
            .use_cls_head
            .then(|| ClassificationHead::new(&mut p, &mut rng, d, config.levels));
        let model = Self {
            config: config.clone(),
            backbone,
            ldwa,
            reg,
            cls,
        };
        Ok((model, p))
    }

    /// Layout for existing values, checking every name and shape.
    pub fn for_params<T: Real>(config: &ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        let (model, fresh) = Self::init::<T>(config, 0)?;
        if fresh.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config declares {} parameter tensors, found {}",
                fresh.len(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in fresh.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {en} {:?}, found {gn} {:?}",
                    et.shape(),
                    gt.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn ldwa(&self) -> Option<&LdwaParams> {
        self.ldwa.as_ref()
    }

    pub fn regression_head(&self) -> &RegressionHead {
        &self.reg
    }

    pub fn classification_head(&self) -> Option<&ClassificationHead> {
        self.cls.as_ref()
    }

    /// Images (B, 3, H, W) in [−1, 1].
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Forward> {
        let pyramid = self.backbone.forward(g, p, images)?;
        let last = pyramid.final_stage();
        let (b, h, w, d) = match *g.shape(last) {
            [b, h, w, d] => (b, h, w, d),
            ref s => return Err(Error::shape("model_forward", format!("final stage {s:?}"))),
        };
        let tokens = g.reshape(last, &[b, h * w, d])?;
        let (t_count, weights) = match &self.ldwa {
            Some(l) => {
                let (t, wts) = l.forward(g, p, tokens)?;
                (t, Some(wts))
            }
            None => (global_average_pool(g, tokens)?, None),
        };
        let y_reg = self.reg.forward(g, p, t_count)?;
        let y_cls = match &self.cls {
            Some(c) => Some(match self.config.cls_input {
                ClsInput::DensityToken => c.forward_token(g, p)?,
                ClsInput::CountFeature => classify_density(g, t_count, p[c.w], p[c.b])?,
            }),
            None => None,
        };
        Ok(Forward {
            pyramid,
            tokens,
            weights,
            t_count,
            y_reg,
            y_cls,
            grid: (h, w),
        })
    }

    /// Regression, classification and total loss for ground-truth counts.
    pub fn losses<T: Real>(
        &self,
        g: &mut Graph<T>,
        fwd: &Forward,
        counts: &[f64],
        stats: &LabelStats,
        loss: &LossConfig,
    ) -> Result<LossTerms> {
        let targets: Vec<f64> = counts
            .iter()
            .map(|&c| stats.to_target(self.config.count_norm, c))
            .collect();
        let l_reg = smooth_l1_loss(g, fwd.y_reg, &targets)?;
        let l_cls = match fwd.y_cls {
            Some(y) => {
                let levels_cfg = stats.density_levels(self.config.levels)?;
                let levels = counts
                    .iter()
                    .map(|&c| quantize_density_level(c, &levels_cfg))
                    .collect::<Result<Vec<_>>>()?;
                Some(density_cls_loss(g, y, &levels, loss.cls_loss)?)
            }
            None => None,
        };
        let total = total_loss(g, l_reg, l_cls, loss)?;
        Ok(LossTerms { l_reg, l_cls, total })
    }

    /// Predicted counts (unclamped) from a forward pass.
    pub fn counts<T: Real>(&self, g: &Graph<T>, fwd: &Forward, stats: &LabelStats) -> Vec<f64> {
        g.value(fwd.y_reg)
            .to_f64()
            .into_iter()
            .map(|y| stats.to_count(self.config.count_norm, y))
            .collect()
    }

    /// Per-image pooling weights; uniform under global average pooling.
    pub fn density_weights<T: Real>(&self, g: &Graph<T>, fwd: &Forward) -> Result<Vec<DensityWeights>> {
        let batch = g.shape(fwd.tokens)[0];
        match fwd.weights {
            Some(w) => g
                .value(w)
                .to_f64()
                .chunks(fwd.grid.0 * fwd.grid.1)
                .map(|row| DensityWeights::new(row.to_vec(), fwd.grid))
                .collect(),
            None => Ok(vec![DensityWeights::uniform(fwd.grid); batch]),
        }
    }
}
