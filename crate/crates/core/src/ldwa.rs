//! Learnable density-weighted averaging.
//!
//! Every final-stage token gets a scalar score `⟨token, w_d⟩ + b_d`; the
//! scores are softmax-normalized over the spatial positions and the pooled
//! feature is the resulting convex combination of tokens. With zero
//! parameters the weights are uniform and the pooling is exactly a global
//! average. Because softmax is shift-invariant, `b_d` never changes the
//! weights; it is still kept as a parameter.

use crate::autodiff::{Graph, Real, Rng, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct LdwaParams {
    /// (1, d) projection row.
    pub w_d: ParamId,
    /// (1,) bias.
    pub b_d: ParamId,
}

impl LdwaParams {
    pub fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut Rng, dim: usize) -> Self {
        LdwaParams {
            w_d: p.weight(rng, "ldwa.w_d", &[1, dim]),
            b_d: p.zeros("ldwa.b_d", &[1]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<(Var, Var)> {
        ldwa_forward(g, tokens, p[self.w_d], p[self.b_d])
    }
}

fn token_dims<T: Real>(g: &Graph<T>, op: &'static str, tokens: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(tokens) {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::shape(op, format!("tokens must be (B, N, d), got {s:?}"))),
    }
}

/// Scores (B, N) for tokens (B, N, d).
pub fn density_scores<T: Real>(g: &mut Graph<T>, tokens: Var, w_d: Var, b_d: Var) -> Result<Var> {
    let (b, n, d) = token_dims(g, "density_scores", tokens)?;
    if g.shape(w_d) != [1, d] {
        return Err(Error::shape(
            "density_scores",
            format!("projection {:?} for token dim {d}", g.shape(w_d)),
        ));
    }
    let s = g.linear(tokens, w_d, Some(b_d))?;
    g.reshape(s, &[b, n])
}

/// Softmax over the token axis.
pub fn normalize_weights<T: Real>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    let axis = g.shape(scores).len() - 1;
    g.softmax(scores, axis)
}

/// Convex combination of tokens (B, N, d) under weights (B, N) → (B, d).
pub fn aggregate<T: Real>(g: &mut Graph<T>, tokens: Var, weights: Var) -> Result<Var> {
    let (b, n, d) = token_dims(g, "aggregate", tokens)?;
    if g.shape(weights) != [b, n] {
        return Err(Error::shape(
            "aggregate",
            format!("weights {:?} for {n} tokens in a batch of {b}", g.shape(weights)),
        ));
    }
    let w = g.reshape(weights, &[b, 1, n])?;
    let pooled = g.matmul(w, tokens)?;
    g.reshape(pooled, &[b, d])
}

/// Returns `(T_count, weights)`.
pub fn ldwa_forward<T: Real>(g: &mut Graph<T>, tokens: Var, w_d: Var, b_d: Var) -> Result<(Var, Var)> {
    let scores = density_scores(g, tokens, w_d, b_d)?;
    let weights = normalize_weights(g, scores)?;
    let pooled = aggregate(g, tokens, weights)?;
    Ok((pooled, weights))
}

/// Plain mean over the token axis, the pooling used when LDWA is disabled.
pub fn global_average_pool<T: Real>(g: &mut Graph<T>, tokens: Var) -> Result<Var> {
    token_dims(g, "global_average_pool", tokens)?;
    g.mean(tokens, 1)
}

/// Normalized per-token weights of one image, laid out over the `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityWeights {
    pub weights: Vec<f64>,
    pub source_shape: (usize, usize),
}

impl DensityWeights {
    pub const SUM_TOL: f64 = 1e-6;

    pub fn new(weights: Vec<f64>, source_shape: (usize, usize)) -> Result<Self> {
        if weights.len() != source_shape.0 * source_shape.1 || weights.is_empty() {
            return Err(Error::shape(
                "density_weights",
                format!("{} weights for a {:?} grid", weights.len(), source_shape),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "density_weights",
                "weights must be finite and non-negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid("density_weights", format!("weights sum to {total}")));
        }
        Ok(Self { weights, source_shape })
    }

    /// Uniform weights, i.e. what global average pooling implies.
    pub fn uniform(source_shape: (usize, usize)) -> Self {
        let n = source_shape.0 * source_shape.1;
        Self {
            weights: vec![1.0 / n as f64; n],
            source_shape,
        }
    }

    /// Row-major grid position (row, col) of the largest weight.
    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) =
            self.weights.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &w)| if w > best.1 { (i, w) } else { best },
            );
        (idx / self.source_shape.1, idx % self.source_shape.1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.source_shape.1 + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use approx::assert_abs_diff_eq;

    fn tokens(g: &mut Graph<f64>, n: usize, d: usize, data: &[f64]) -> Var {
        g.constant(Tensor::from_f64(&[1, n, d], data).unwrap())
    }

    #[test]
    fn zero_projection_gives_zero_scores() {
        let mut g = Graph::new();
        let t = tokens(&mut g, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = g.constant(Tensor::zeros(&[1, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        let s = density_scores(&mut g, t, w, b).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_tokens_score_by_hand() {
        let mut g = Graph::new();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = tokens(&mut g, 3, 3, &eye);
        let w = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let s = density_scores(&mut g, t, w, b).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 1.0, 1.0]);
    }

    #[test]
    fn projection_dimension_mismatch_is_an_error() {
        let mut g = Graph::new();
        let t = tokens(&mut g, 2, 2, &[1.0; 4]);
        let w = g.constant(Tensor::zeros(&[1, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(density_scores(&mut g, t, w, b).is_err());
    }

    #[test]
    fn closed_form_softmax_weights() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap());
        let w = normalize_weights(&mut g, s).unwrap();
        assert_abs_diff_eq!(g.value(w).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(w).data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_by_hand_and_length_mismatch() {
        let mut g = Graph::new();
        let t = tokens(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = g.constant(Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap());
        let pooled = aggregate(&mut g, t, w).unwrap();
        assert_eq!(g.value(pooled).data(), &[0.25, 0.75]);
        let bad = g.constant(Tensor::from_f64(&[1, 3], &[0.2, 0.3, 0.5]).unwrap());
        assert!(aggregate(&mut g, t, bad).is_err());
    }

    #[test]
    fn saturated_score_dominates() {
        let mut g = Graph::new();
        // Token 1 projects 20 higher than every other token.
        let t = tokens(&mut g, 4, 2, &[0.0, 1.0, 20.0, 0.5, 0.0, -1.0, 0.0, 0.0]);
        let w = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let (_, weights) = ldwa_forward(&mut g, t, w, b).unwrap();
        assert!(g.value(weights).data()[1] > 0.999);
    }

    #[test]
    fn density_weights_validation() {
        assert!(DensityWeights::new(vec![0.5, 0.5], (1, 2)).is_ok());
        assert!(DensityWeights::new(vec![0.5, 0.6], (1, 2)).is_err());
        assert!(DensityWeights::new(vec![1.5, -0.5], (1, 2)).is_err());
        assert!(DensityWeights::new(vec![1.0], (1, 2)).is_err());
        let w = DensityWeights::new(vec![0.1, 0.2, 0.6, 0.1], (2, 2)).unwrap();
        assert_eq!(w.argmax(), (1, 0));
    }
}
