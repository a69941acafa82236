//! Optimizer, learning-rate schedule and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{derived_rng, flush_denormals, Gradients, Graph, Real, Tensor};
use crate::checkpoint::Checkpoint;
use crate::data::{flip_decision, Dataset};
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::metrics::evaluate;
use crate::model::{CrowdCounter, LabelStats, ModelConfig};
use crate::params::{Bound, ParamStore};

/// RNG stream tag of epoch `e`'s shuffle and flips is `SHUFFLE_STREAM + e`.
pub const SHUFFLE_STREAM: u64 = 1 << 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}; expected f32 or f64"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fractions of `epochs` at which the rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub seed: u64,
    pub clip_gradients: bool,
    pub grad_clip_norm: f64,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 60,
            lr_milestones: vec![0.6, 0.85],
            lr_gamma: 0.1,
            seed: 0,
            clip_gradients: true,
            grad_clip_norm: 5.0,
            precision: Precision::F32,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes and epochs must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_gamma > 0.0) {
            return bad("weight_decay must be >= 0 and lr_gamma > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        let m = &self.lr_milestones;
        if m.iter().any(|&f| !(f > 0.0 && f < 1.0)) || m.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("lr_milestones {m:?} must be strictly increasing in (0, 1)"));
        }
        if self.clip_gradients && !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Milestone epochs (0-based epoch index at which each decay starts).
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }

    /// Rate used throughout 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestone_epochs().iter().filter(|&&m| m <= epoch).count();
        self.peak_lr * self.lr_gamma.powi(passed as i32)
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with decoupled weight decay. `grads[i]` belongs to the
/// i-th parameter; `None` marks a parameter with no gradient path, which is
/// left untouched (weight decay included).
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient shape for {}", params.name(id)),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr_t, wd, eps) = (T::c(lr), T::c(lr * cfg.weight_decay), T::c(cfg.eps));
    for (id, g) in params.ids().zip(grads) {
        let Some(g) = g else { continue };
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - wd * p[k] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Gradients aligned with the parameter store.
pub fn collect_grads<T: Real>(grads: &Gradients<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound
        .vars()
        .iter()
        .map(|&v| grads.reached(v).then(|| grads.get(v)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub l_reg: f64,
    /// Zero for models without a classification head.
    pub l_cls: f64,
    pub l_total: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,l_reg,l_cls,l_total,val_mae,val_rmse,lr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.l_reg, self.l_cls, self.l_total, self.val_mae, self.val_rmse, self.lr
        )
    }
}

pub fn epoch_log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for e in history {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Aborted at 1-based `epoch`; the checkpoint holds the last good state.
    Diverged {
        epoch: usize,
        detail: String,
    },
}

pub struct TrainOutcome<T> {
    /// Best-validation parameters.
    pub checkpoint: Checkpoint<T>,
    pub status: TrainStatus,
}

/// Loss averages of one epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochLosses {
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

pub struct Trainer<'a, T> {
    pub model: CrowdCounter,
    pub params: ParamStore<T>,
    pub state: AdamState<T>,
    pub stats: LabelStats,
    pub cfg: &'a TrainConfig,
    pub loss: &'a LossConfig,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model_cfg: &ModelConfig, cfg: &'a TrainConfig, loss: &'a LossConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let stats = LabelStats::from_counts(&train.counts())?;
        let (model, params) = CrowdCounter::init::<T>(model_cfg, cfg.seed)?;
        let state = AdamState::new(&params);
        Ok(Self {
            model,
            params,
            state,
            stats,
            cfg,
            loss,
        })
    }

    /// One optimizer step on the given samples.
    pub fn step(&mut self, data: &Dataset, indices: &[usize], flips: &[bool], lr: f64) -> Result<EpochLosses> {
        let (x, counts) = data.batch::<T>(indices, Some(flips))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let x = g.constant(x);
        let fwd = self.model.forward(&mut g, &p, x)?;
        let terms = self.model.losses(&mut g, &fwd, &counts, &self.stats, self.loss)?;
        let value = |v| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        let out = EpochLosses {
            l_reg: value(terms.l_reg),
            l_cls: terms.l_cls.map_or(0.0, value),
            l_total: value(terms.total),
        };
        let grads = g.backward(terms.total)?;
        let mut grads = collect_grads(&grads, &p);
        if self.cfg.clip_gradients {
            clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        }
        adam_step(&mut self.params, &grads, &mut self.state, self.cfg, lr)?;
        Ok(out)
    }

    /// Runs 0-based epoch `epoch` over the whole split.
    pub fn epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochLosses> {
        let mut rng = derived_rng(self.cfg.seed, SHUFFLE_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| flip_decision(&mut rng)).collect();
        let lr = self.lr_for(epoch);
        let mut acc = EpochLosses::default();
        for (idx, fl) in order.chunks(self.cfg.batch_size).zip(flips.chunks(self.cfg.batch_size)) {
            let l = self.step(data, idx, fl, lr)?;
            let w = idx.len() as f64 / data.len() as f64;
            acc.l_reg += w * l.l_reg;
            acc.l_cls += w * l.l_cls;
            acc.l_total += w * l.l_total;
        }
        Ok(acc)
    }

    pub fn lr_for(&self, epoch: usize) -> f64 {
        self.cfg.lr_at(epoch)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. }
    )
}

/// Trains from scratch, validating after every epoch and keeping the
/// parameters with the lowest validation MAE. `on_epoch` sees each log line
/// as it is produced.
pub fn train<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    flush_denormals();
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut tr = Trainer::<T>::new(model_cfg, cfg, loss, train_set)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut status = TrainStatus::Completed;
    for epoch in 0..cfg.epochs {
        let losses = match tr.epoch(train_set, epoch) {
            Ok(l) if l.l_total.is_finite() => l,
            Ok(l) => {
                status = TrainStatus::Diverged {
                    epoch: epoch + 1,
                    detail: format!("epoch loss {}", l.l_total),
                };
                break;
            }
            Err(e) if is_divergence(&e) => {
                status = TrainStatus::Diverged {
                    epoch: epoch + 1,
                    detail: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let report = evaluate(&tr.model, &tr.params, &tr.stats, val_set, cfg.eval_batch_size)?;
        let log = EpochLog {
            epoch: epoch + 1,
            l_reg: losses.l_reg,
            l_cls: losses.l_cls,
            l_total: losses.l_total,
            val_mae: report.mae,
            val_rmse: report.rmse,
            lr: tr.lr_for(epoch),
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(mae, _, _)| report.mae < *mae) {
            best = Some((report.mae, epoch + 1, tr.params.clone()));
        }
    }
    let (epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        // Diverged during the first epoch: keep the initialization.
        None => (0, CrowdCounter::init::<T>(model_cfg, cfg.seed)?.1),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: model_cfg.clone(),
            train: cfg.clone(),
            loss: loss.clone(),
            stats: tr.stats,
            epoch,
            history,
            params,
        },
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        p
    }

    #[test]
    fn schedule_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.milestone_epochs(), vec![36, 51]);
        assert_eq!(cfg.lr_at(0), 5e-5);
        assert_eq!(cfg.lr_at(35), 5e-5);
        assert!((cfg.lr_at(36) - 5e-6).abs() < 1e-20);
        assert!((cfg.lr_at(59) - 5e-7).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_milestones: vec![0.8, 0.5],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            peak_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = store(&[1.0, -2.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut s, &cfg, 1e-3).unwrap();
        assert_eq!(p.get(p.ids().next().unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = store(&[0.5, 0.5, 0.5]);
        let mut s = AdamState::new(&p);
        let g = Tensor::from_f64(&[3], &[0.3, -7.0, 0.05]).unwrap();
        adam_step(&mut p, &[Some(g)], &mut s, &cfg, 1e-3).unwrap();
        let after = p.get(p.ids().next().unwrap()).data().to_vec();
        for (a, sign) in after.iter().zip([1.0, -1.0, 1.0]) {
            let step = 0.5 - a;
            assert!((step - sign * 1e-3).abs() <= 1e-6 * 1e-3, "{step}");
        }
    }

    #[test]
    fn decoupled_weight_decay_and_unreached_params() {
        let cfg = TrainConfig::default();
        let mut p = store(&[2.0]);
        p.add("frozen", Tensor::from_f64(&[1], &[3.0]).unwrap());
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::zeros(&[1])), None], &mut s, &cfg, 0.1).unwrap();
        let ids: Vec<_> = p.ids().collect();
        assert!((p.get(ids[0]).data()[0] - (2.0 - 0.1 * 5e-4 * 2.0)).abs() < 1e-15);
        assert_eq!(p.get(ids[1]).data()[0], 3.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let cfg = TrainConfig::default();
        let mut p = store(&[1.0]);
        let mut s = AdamState::new(&p);
        let g = Tensor::new(&[1], vec![f64::NAN]);
        // Tensor construction itself accepts NaN; the optimizer must not.
        let err = adam_step(&mut p, &[Some(g.unwrap())], &mut s, &cfg, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let c = g[0].as_ref().unwrap().data();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(Tensor::<f64>::from_f64(&[1], &[0.5]).unwrap())];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn csv_format() {
        let e = EpochLog {
            epoch: 1,
            l_reg: 0.5,
            l_cls: 2.0,
            l_total: 0.502,
            val_mae: 3.0,
            val_rmse: 4.0,
            lr: 5e-5,
        };
        assert_eq!(
            epoch_log_csv(&[e]),
            "epoch,l_reg,l_cls,l_total,val_mae,val_rmse,lr\n1,0.5,2,0.502,3,4,0.00005\n"
        );
    }
}
