//! Property checks shared by the property-test target and the acceptance run.

use crowd_count::autodiff::{Graph, Tensor};
use crowd_count::heads::{quantize_density_level, DensityLevelConfig};
use crowd_count::ldwa::{global_average_pool, ldwa_forward};
use crowd_count::metrics::compute_metrics;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

#[derive(Clone, Debug)]
pub struct LdwaInput {
    pub batch: usize,
    pub n: usize,
    pub d: usize,
    pub tokens: Vec<f64>,
    pub w_d: Vec<f64>,
    pub b_d: f64,
    pub shift: f64,
}

pub fn ldwa_input() -> impl Strategy<Value = LdwaInput> {
    (1usize..=3, 1usize..=16, 1usize..=8).prop_flat_map(|(batch, n, d)| {
        (
            prop::collection::vec(-10.0..10.0f64, batch * n * d),
            prop::collection::vec(-3.0..3.0f64, d),
            -5.0..5.0f64,
            -50.0..50.0f64,
        )
            .prop_map(move |(tokens, w_d, b_d, shift)| LdwaInput {
                batch,
                n,
                d,
                tokens,
                w_d,
                b_d,
                shift,
            })
    })
}

/// Pooled features (B·d) and weights (B·N) at f64.
fn pool(x: &LdwaInput, w_d: &[f64], b_d: f64) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::new(&[x.batch, x.n, x.d], x.tokens.clone()).unwrap());
    let w = g.constant(Tensor::new(&[1, x.d], w_d.to_vec()).unwrap());
    let b = g.constant(Tensor::new(&[1], vec![b_d]).unwrap());
    let (pooled, weights) = ldwa_forward(&mut g, t, w, b).unwrap();
    (g.value(pooled).to_f64(), g.value(weights).to_f64())
}

fn gap(x: &LdwaInput) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::new(&[x.batch, x.n, x.d], x.tokens.clone()).unwrap());
    let p = global_average_pool(&mut g, t).unwrap();
    g.value(p).to_f64()
}

pub fn weights_form_a_distribution(x: &LdwaInput) -> Result<(), TestCaseError> {
    let (_, w) = pool(x, &x.w_d, x.b_d);
    for row in w.chunks(x.n) {
        prop_assert!(row.iter().all(|&v| v >= 0.0), "negative weight in {row:?}");
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6, "weights sum to {total}");
    }
    Ok(())
}

/// Adding a constant to every score (through the bias) leaves weights unchanged.
pub fn shift_invariant(x: &LdwaInput) -> Result<(), TestCaseError> {
    let (_, w0) = pool(x, &x.w_d, x.b_d);
    let (_, w1) = pool(x, &x.w_d, x.b_d + x.shift);
    for (a, b) in w0.iter().zip(&w1) {
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b} after shift {}", x.shift);
    }
    Ok(())
}

pub fn zero_params_match_average_pooling(x: &LdwaInput) -> Result<(), TestCaseError> {
    let (pooled, _) = pool(x, &vec![0.0; x.d], 0.0);
    for (a, b) in pooled.iter().zip(gap(x)) {
        prop_assert!((a - b).abs() <= 1e-6, "{a} vs average {b}");
    }
    Ok(())
}

/// Each pooled coordinate lies between the smallest and largest token value.
pub fn convex_combination_bound(x: &LdwaInput) -> Result<(), TestCaseError> {
    let (pooled, _) = pool(x, &x.w_d, x.b_d);
    for b in 0..x.batch {
        for j in 0..x.d {
            let column = (0..x.n).map(|i| x.tokens[(b * x.n + i) * x.d + j]);
            let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let v = pooled[b * x.d + j];
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
    }
    Ok(())
}

pub fn ldwa_invariants(x: &LdwaInput) -> Result<(), TestCaseError> {
    weights_form_a_distribution(x)?;
    shift_invariant(x)?;
    zero_params_match_average_pooling(x)?;
    convex_combination_bound(x)
}

/// Level by counting the thresholds `l·c_max/K` (l = 1..K−1) that `c`
/// reaches, compared in exact integer arithmetic.
pub fn brute_force_level(c: u64, c_max: u64, k: u64) -> u64 {
    (1..k).filter(|&l| l * c_max <= c * k).count() as u64
}

pub const QUANT_C_MAX: [u64; 3] = [10, 100, 3139];
pub const QUANT_LEVELS: [usize; 3] = [2, 5, 10];

/// Every integer count up to twice `c_max`: matches the oracle, in range,
/// and monotone.
pub fn quantization_grid() -> Result<(), String> {
    for c_max in QUANT_C_MAX {
        for k in QUANT_LEVELS {
            let cfg = DensityLevelConfig::new(k, c_max as f64).map_err(|e| e.to_string())?;
            let mut prev = 0;
            for c in 0..=2 * c_max {
                let got = quantize_density_level(c as f64, &cfg).map_err(|e| e.to_string())?;
                let want = brute_force_level(c.min(c_max), c_max, k as u64) as usize;
                if got != want {
                    return Err(format!("c={c} c_max={c_max} K={k}: got {got}, oracle {want}"));
                }
                if got >= k || got < prev {
                    return Err(format!("c={c} c_max={c_max} K={k}: level {got} after {prev}"));
                }
                prev = got;
            }
            if prev != k - 1 {
                return Err(format!("c_max={c_max} K={k}: top level {prev}"));
            }
        }
    }
    Ok(())
}

pub fn rmse_at_least_mae(preds: &[f64], truth: &[f64]) -> Result<(), TestCaseError> {
    let r = compute_metrics(preds, truth).unwrap();
    prop_assert!(r.rmse >= r.mae - 1e-12, "rmse {} < mae {}", r.rmse, r.mae);
    let n = preds.len() as f64;
    let mae: f64 = preds
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.max(0.0) - t).abs())
        .sum::<f64>()
        / n;
    prop_assert!((r.mae - mae).abs() <= 1e-9 * (1.0 + mae));
    Ok(())
}

pub fn metric_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|m| {
        (
            prop::collection::vec(-20.0..300.0f64, m),
            prop::collection::vec(0.0..300.0f64, m),
        )
    })
}
