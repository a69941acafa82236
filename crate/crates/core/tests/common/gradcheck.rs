//! Central finite-difference oracle for every differentiable primitive and
//! for composed model paths, at f64.
//!
//! An output `y` is reduced to the scalar `Σ y ⊙ R` with a fixed random `R`.
//! Per input, up to a probe budget of elements is perturbed by ±h and the
//! error is `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-6)`
//! over the probed elements. The floor keeps exactly-zero gradients (such as
//! the LDWA bias under softmax) from dividing finite-difference noise by zero.

use crowd_count::autodiff::{seeded_rng, Graph, Rng, Tensor, Var};
use crowd_count::backbone::{AttentionBlock, BackboneConfig, MbConv};
use crowd_count::heads::{
    classify_density, density_cls_loss, regress_count, smooth_l1_loss, total_loss, ClsLoss, LossConfig,
};
use crowd_count::ldwa::ldwa_forward;
use crowd_count::model::{CrowdCounter, LabelStats, ModelConfig};
use crowd_count::params::{Bound, ParamStore};
use crowd_count::Result;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
const PROBE_BUDGET: usize = 160;
const MAX_PROBES_PER_INPUT: usize = 40;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

impl Instance {
    pub fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Instance {
            inputs,
            build: Box::new(build),
        }
    }
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut Rng) -> Instance,
}

fn normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.08 apart, so max/argmax is stable under ±h.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .into_iter()
        .map(|i| i as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(0.0..0.01))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Pushes entries out of a ±0.02 band around each kink.
fn avoid_kinks(mut t: Tensor<f64>, kinks: &[f64]) -> Tensor<f64> {
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < 0.02 {
                *v = k + if *v >= k { 0.05 } else { -0.05 };
            }
        }
    }
    t
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn shape(rng: &mut Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = dim(rng, min_rank, max_rank);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn weighted_loss(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r)?;
    g.sum_all(prod)
}

fn loss_at(inst: &Instance, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    let l = weighted_loss(&mut g, out, weights)?;
    Ok(g.value(l).item())
}

/// Largest per-input error of one instance.
pub fn check(inst: &Instance, rng: &mut Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    let weights = normal(rng, g.shape(out), 1.0);
    let l = weighted_loss(&mut g, out, &weights)?;
    let grads = g.backward(l)?;

    let per_input = (PROBE_BUDGET / inst.inputs.len().max(1)).clamp(2, MAX_PROBES_PER_INPUT);
    let mut worst: f64 = 0.0;
    let mut perturbed = inst.inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        let n = inst.inputs[i].numel();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > per_input {
            idx.shuffle(rng);
            idx.truncate(per_input);
        }
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in idx {
            let x0 = inst.inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + H;
            let lp = loss_at(inst, &perturbed, &weights)?;
            perturbed[i].data_mut()[j] = x0 - H;
            let lm = loss_at(inst, &perturbed, &weights)?;
            perturbed[i].data_mut()[j] = x0;
            let numeric = (lp - lm) / (2.0 * H);
            let a = analytic.data()[j];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs `INSTANCES` random instances of a case; returns the worst error.
pub fn run_case(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let inst = (case.make)(&mut rng);
        worst = worst.max(check(&inst, &mut rng)?);
    }
    Ok(worst)
}

fn same_shape_pair(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let s = shape(rng, 1, 3);
    vec![normal(rng, &s, 1.0), normal(rng, &s, 1.0)]
}

fn scalar_pair(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let s = shape(rng, 1, 3);
    vec![normal(rng, &s, 1.0), normal(rng, &[1], 1.0)]
}

fn unary(
    rng: &mut Rng,
    f: fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: fn(&mut Rng, &[usize]) -> Tensor<f64>,
) -> Instance {
    let s = shape(rng, 1, 3);
    let input = x(rng, &s);
    Instance::new(vec![input], move |g, v| f(g, v[0]))
}

fn conv_case(rng: &mut Rng, depthwise: bool) -> Instance {
    let batch = dim(rng, 1, 2);
    let stride = dim(rng, 1, 2);
    let (c_in, c_out, groups, k, pad) = if depthwise {
        let c = dim(rng, 1, 4);
        (c, c, c, 3, 1)
    } else {
        let groups = dim(rng, 1, 2);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { dim(rng, 0, 1) } else { 0 };
        (groups * dim(rng, 1, 2), groups * dim(rng, 1, 3), groups, k, pad)
    };
    let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
    let x = normal(rng, &[batch, c_in, h, w], 1.0);
    let wt = normal(rng, &[c_out, c_in / groups, k, k], 0.5);
    let with_bias = rng.random_bool(0.5);
    let mut inputs = vec![x, wt];
    if with_bias {
        inputs.push(normal(rng, &[c_out], 0.5));
    }
    Instance::new(inputs, move |g, v| {
        let b = v.get(2).copied();
        if depthwise {
            g.depthwise_conv2d(v[0], v[1], b, stride, pad)
        } else {
            g.conv2d(v[0], v[1], b, stride, pad, groups)
        }
    })
}

fn reduce_case(rng: &mut Rng, op: fn(&mut Graph<f64>, Var, usize) -> Result<Var>, distinct_values: bool) -> Instance {
    let s = shape(rng, 1, 3);
    let axis = dim(rng, 0, s.len() - 1);
    let x = if distinct_values {
        distinct(rng, &s)
    } else {
        normal(rng, &s, 1.0)
    };
    Instance::new(vec![x], move |g, v| op(g, v[0], axis))
}

/// Replaces every parameter with N(0, 0.3²) so biases and norm affines are
/// exercised away from their initial values.
fn randomize(p: &mut ParamStore<f64>, rng: &mut Rng) {
    for id in p.ids().collect::<Vec<_>>() {
        let shape = p.get(id).shape().to_vec();
        p.set(id, normal(rng, &shape, 0.3)).unwrap();
    }
}

fn with_params(first: Tensor<f64>, p: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut inputs = vec![first];
    inputs.extend(p.iter().map(|(_, t)| t.clone()));
    inputs
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            make: |rng| Instance::new(same_shape_pair(rng), |g, v| g.add(v[0], v[1])),
        },
        Case {
            name: "add_scalar_broadcast",
            make: |rng| Instance::new(scalar_pair(rng), |g, v| g.add(v[0], v[1])),
        },
        Case {
            name: "sub",
            make: |rng| Instance::new(same_shape_pair(rng), |g, v| g.sub(v[0], v[1])),
        },
        Case {
            name: "sub_scalar_broadcast",
            make: |rng| Instance::new(scalar_pair(rng), |g, v| g.sub(v[1], v[0])),
        },
        Case {
            name: "mul",
            make: |rng| Instance::new(same_shape_pair(rng), |g, v| g.mul(v[0], v[1])),
        },
        Case {
            name: "mul_scalar_broadcast",
            make: |rng| Instance::new(scalar_pair(rng), |g, v| g.mul(v[0], v[1])),
        },
        Case {
            name: "scalar_mul",
            make: |rng| {
                let s = shape(rng, 1, 3);
                let k: f64 = rng.random_range(-2.0..2.0);
                Instance::new(vec![normal(rng, &s, 1.0)], move |g, v| g.scalar_mul(v[0], k))
            },
        },
        Case {
            name: "bias_add",
            make: |rng| {
                let s = shape(rng, 2, 4);
                let axis = dim(rng, 0, s.len() - 1);
                let b = normal(rng, &[s[axis]], 1.0);
                Instance::new(vec![normal(rng, &s, 1.0), b], move |g, v| g.bias_add(v[0], v[1], axis))
            },
        },
        Case {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
                Instance::new(vec![normal(rng, &[m, k], 1.0), normal(rng, &[k, n], 1.0)], |g, v| {
                    g.matmul(v[0], v[1])
                })
            },
        },
        Case {
            name: "matmul_batched",
            make: |rng| {
                let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                Instance::new(
                    vec![normal(rng, &[b, m, k], 1.0), normal(rng, &[b, k, n], 1.0)],
                    |g, v| g.matmul(v[0], v[1]),
                )
            },
        },
        Case {
            name: "linear",
            make: |rng| {
                let (d_in, d_out) = (dim(rng, 1, 5), dim(rng, 1, 5));
                let mut xs = shape(rng, 1, 2);
                xs.push(d_in);
                let with_bias = rng.random_bool(0.5);
                let mut inputs = vec![normal(rng, &xs, 1.0), normal(rng, &[d_out, d_in], 1.0)];
                if with_bias {
                    inputs.push(normal(rng, &[d_out], 1.0));
                }
                Instance::new(inputs, |g, v| g.linear(v[0], v[1], v.get(2).copied()))
            },
        },
        Case {
            name: "conv2d",
            make: |rng| conv_case(rng, false),
        },
        Case {
            name: "depthwise_conv2d",
            make: |rng| conv_case(rng, true),
        },
        Case {
            name: "relu",
            make: |rng| unary(rng, |g, x| g.relu(x), |r, s| avoid_kinks(normal(r, s, 1.0), &[0.0])),
        },
        Case {
            name: "gelu",
            make: |rng| unary(rng, |g, x| g.gelu(x), |r, s| normal(r, s, 2.0)),
        },
        Case {
            name: "sigmoid",
            make: |rng| unary(rng, |g, x| g.sigmoid(x), |r, s| normal(r, s, 2.0)),
        },
        Case {
            name: "exp",
            make: |rng| unary(rng, |g, x| g.exp(x), |r, s| normal(r, s, 1.0)),
        },
        Case {
            name: "log",
            make: |rng| unary(rng, |g, x| g.log(x), |r, s| uniform(r, s, 0.3, 3.0)),
        },
        Case {
            name: "huber",
            make: |rng| {
                unary(
                    rng,
                    |g, x| g.huber(x),
                    |r, s| avoid_kinks(normal(r, s, 2.0), &[-1.0, 1.0]),
                )
            },
        },
        Case {
            name: "softmax",
            make: |rng| reduce_case(rng, |g, x, a| g.softmax(x, a), false),
        },
        Case {
            name: "layer_norm",
            make: |rng| {
                let mut s = shape(rng, 0, 2);
                let d = dim(rng, 2, 6);
                s.push(d);
                let inputs = vec![normal(rng, &s, 1.0), normal(rng, &[d], 1.0), normal(rng, &[d], 1.0)];
                Instance::new(inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
            },
        },
        Case {
            name: "batch_stat_norm",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3)];
                Instance::new(vec![normal(rng, &s, 1.0)], |g, v| g.batch_stat_norm(v[0], 1e-5))
            },
        },
        Case {
            name: "sum",
            make: |rng| reduce_case(rng, |g, x, a| g.sum(x, a), false),
        },
        Case {
            name: "mean",
            make: |rng| reduce_case(rng, |g, x, a| g.mean(x, a), false),
        },
        Case {
            name: "max",
            make: |rng| reduce_case(rng, |g, x, a| g.max(x, a), true),
        },
        Case {
            name: "sum_all",
            make: |rng| unary(rng, |g, x| g.sum_all(x), |r, s| normal(r, s, 1.0)),
        },
        Case {
            name: "mean_all",
            make: |rng| unary(rng, |g, x| g.mean_all(x), |r, s| normal(r, s, 1.0)),
        },
        Case {
            name: "reshape",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
                let to = [s[1], s[0] * s[2]];
                Instance::new(vec![normal(rng, &s, 1.0)], move |g, v| g.reshape(v[0], &to))
            },
        },
        Case {
            name: "transpose",
            make: |rng| {
                let s = shape(rng, 2, 4);
                let mut perm: Vec<usize> = (0..s.len()).collect();
                perm.shuffle(rng);
                Instance::new(vec![normal(rng, &s, 1.0)], move |g, v| g.transpose(v[0], &perm))
            },
        },
        Case {
            name: "slice",
            make: |rng| {
                let s = shape(rng, 1, 3);
                let axis = dim(rng, 0, s.len() - 1);
                let start = dim(rng, 0, s[axis] - 1);
                let len = dim(rng, 1, s[axis] - start);
                Instance::new(vec![normal(rng, &s, 1.0)], move |g, v| g.slice(v[0], axis, start, len))
            },
        },
        Case {
            name: "window_partition",
            make: |rng| {
                let ws = dim(rng, 1, 3);
                let s = [dim(rng, 1, 2), ws * dim(rng, 1, 2), ws * dim(rng, 1, 2), dim(rng, 1, 3)];
                Instance::new(vec![normal(rng, &s, 1.0)], move |g, v| g.window_partition(v[0], ws))
            },
        },
        Case {
            name: "window_merge",
            make: |rng| {
                let ws = dim(rng, 1, 3);
                let (b, nh, nw, c) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
                let x = normal(rng, &[b * nh * nw, ws * ws, c], 1.0);
                Instance::new(vec![x], move |g, v| g.window_merge(v[0], ws, b, nh * ws, nw * ws))
            },
        },
    ]
}

/// Pooling, regression and smooth-L1 composed; inputs are tokens, w_d,
/// b_d, w_reg and b_reg.
fn ldwa_regression_loss(rng: &mut Rng) -> Instance {
    let (b, n, d) = (dim(rng, 1, 3), dim(rng, 2, 6), dim(rng, 2, 5));
    let targets: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
    let inputs = vec![
        normal(rng, &[b, n, d], 1.0),
        normal(rng, &[1, d], 1.0),
        normal(rng, &[1], 1.0),
        normal(rng, &[1, d], 1.0),
        normal(rng, &[1], 1.0),
    ];
    Instance::new(inputs, move |g, v| {
        let (pooled, _) = ldwa_forward(g, v[0], v[1], v[2])?;
        let y = regress_count(g, pooled, v[3], v[4])?;
        smooth_l1_loss(g, y, &targets)
    })
}

fn cls_loss_case(rng: &mut Rng, mode: ClsLoss) -> Instance {
    let (rows, d, k) = (dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 6));
    let batch = if rows == 1 { dim(rng, 1, 4) } else { rows };
    let levels: Vec<usize> = (0..batch).map(|_| dim(rng, 0, k - 1)).collect();
    let inputs = vec![
        normal(rng, &[rows, d], 1.0),
        normal(rng, &[k, d], 1.0),
        normal(rng, &[k], 1.0),
    ];
    Instance::new(inputs, move |g, v| {
        let y = classify_density(g, v[0], v[1], v[2])?;
        density_cls_loss(g, y, &levels, mode)
    })
}

fn mbconv_case(rng: &mut Rng) -> Instance {
    let c_in = dim(rng, 1, 3);
    let stride = dim(rng, 1, 2);
    let c_out = if stride == 1 && rng.random_bool(0.5) {
        c_in
    } else {
        dim(rng, 1, 3)
    };
    let mut p = ParamStore::new();
    let block = MbConv::new(&mut p, rng, "b", c_in, c_out, 2, stride);
    randomize(&mut p, rng);
    let batch = dim(rng, 1, 2);
    let x = normal(rng, &[batch, c_in, 4, 4], 1.0);
    Instance::new(with_params(x, &p), move |g, v| {
        block.forward(g, &Bound::from_vars(v[1..].to_vec()), v[0])
    })
}

fn attention_case(rng: &mut Rng) -> Instance {
    let heads = dim(rng, 1, 2);
    let channels = heads * dim(rng, 1, 3);
    let ws = dim(rng, 1, 2);
    let mut p = ParamStore::new();
    let block = AttentionBlock::new(&mut p, rng, "a", channels, heads, ws, 2).unwrap();
    randomize(&mut p, rng);
    let side = ws * dim(rng, 1, 2);
    let batch = dim(rng, 1, 2);
    let x = normal(rng, &[batch, side, side, channels], 1.0);
    Instance::new(with_params(x, &p), move |g, v| {
        block.forward(g, &Bound::from_vars(v[1..].to_vec()), v[0])
    })
}

/// 64×64 input, so the final grid is 2×2 and pooling weights matter.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: [64, 64],
            channels: [2, 4, 4, 4],
            blocks_per_stage: [1, 1, 1, 1],
            attention_heads: [2, 2],
            window: 2,
            mlp_ratio: 2,
            expand_ratio: 2,
        },
        ..ModelConfig::default()
    }
}

/// Whole counter: image and every parameter against the total loss.
fn model_case(rng: &mut Rng) -> Instance {
    let cfg = tiny_model_config();
    let (model, mut p) = CrowdCounter::init::<f64>(&cfg, rng.random()).unwrap();
    randomize(&mut p, rng);
    let counts: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..20.0)).collect();
    let stats = LabelStats::from_counts(&[0.0, 5.0, 20.0]).unwrap();
    let loss = LossConfig {
        lambda: 0.3,
        ..LossConfig::default()
    };
    let x = normal(rng, &[2, 3, 64, 64], 1.0);
    Instance::new(with_params(x, &p), move |g, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let fwd = model.forward(g, &bound, v[0])?;
        Ok(model.losses(g, &fwd, &counts, &stats, &loss)?.total)
    })
}

pub fn composite_cases() -> Vec<Case> {
    vec![
        Case {
            name: "ldwa_regression_smooth_l1",
            make: ldwa_regression_loss,
        },
        Case {
            name: "classification_categorical",
            make: |rng| cls_loss_case(rng, ClsLoss::Categorical),
        },
        Case {
            name: "classification_per_class_bce",
            make: |rng| cls_loss_case(rng, ClsLoss::PerClassBce),
        },
        Case {
            name: "total_loss",
            make: |rng| {
                let lambda: f64 = rng.random_range(0.0..2.0);
                let inputs = vec![uniform(rng, &[1], 0.1, 2.0), uniform(rng, &[1], 0.1, 2.0)];
                Instance::new(inputs, move |g, v| {
                    let cfg = LossConfig {
                        lambda,
                        ..LossConfig::default()
                    };
                    let a = g.sum_all(v[0])?;
                    let b = g.sum_all(v[1])?;
                    total_loss(g, a, Some(b), &cfg)
                })
            },
        },
        Case {
            name: "mbconv_block",
            make: mbconv_case,
        },
        Case {
            name: "attention_block",
            make: attention_case,
        },
        Case {
            name: "full_model_total_loss",
            make: model_case,
        },
    ]
}

pub fn all_cases() -> Vec<Case> {
    let mut v = primitive_cases();
    v.extend(composite_cases());
    v
}
