//! Hypothesis families, local empirical risk, and analytic gradients.
//!
//! Two families sit behind one interface: a linear-in-features model with a
//! selectable basis (the convex case, where exact least-squares oracles exist)
//! and a one-hidden-layer tanh network (the nonconvex case). Gradients are
//! analytic per family and checked against central finite differences in the
//! test suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DataShard;
use crate::error::{Error, Result};

/// Feature basis for the linear-in-features family. Every basis starts with a
/// constant bias feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// `(1, x_1, .., x_d)`.
    Raw,
    /// `(1, x_i^p)` for every coordinate `i` and power `p = 1..=degree`.
    /// No cross terms.
    Polynomial { degree: usize },
    /// `(1, cos(w_m . x), sin(w_m . x))` for seeded random frequencies `w_m`.
    Fourier { frequencies: Vec<Vec<f64>> },
}

/// A hypothesis function family together with its dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HypothesisSpec {
    LinearBasis {
        input_dim: usize,
        feature_map: FeatureMap,
    },
    /// `h(x) = c + sum_m v_m tanh(w_m . x + b_m)`, parameters packed as
    /// `[w_1, b_1, .., w_W, b_W, v_1, .., v_W, c]`.
    OneHiddenLayer {
        input_dim: usize,
        hidden_width: usize,
    },
}

impl HypothesisSpec {
    pub fn linear_raw(input_dim: usize) -> Self {
        HypothesisSpec::LinearBasis {
            input_dim,
            feature_map: FeatureMap::Raw,
        }
    }

    pub fn linear_polynomial(input_dim: usize, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument(
                "polynomial basis needs degree >= 1".into(),
            ));
        }
        Ok(HypothesisSpec::LinearBasis {
            input_dim,
            feature_map: FeatureMap::Polynomial { degree },
        })
    }

    /// Random Fourier basis with `order` frequency vectors drawn once from a
    /// standard normal seeded by `seed`; evaluation is deterministic afterwards.
    pub fn linear_fourier(input_dim: usize, order: usize, seed: u64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument(
                "fourier basis needs order >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..order)
            .map(|_| {
                (0..input_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(HypothesisSpec::LinearBasis {
            input_dim,
            feature_map: FeatureMap::Fourier { frequencies },
        })
    }

    pub fn one_hidden_layer(input_dim: usize, hidden_width: usize) -> Result<Self> {
        if hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden width must be >= 1".into()));
        }
        Ok(HypothesisSpec::OneHiddenLayer {
            input_dim,
            hidden_width,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            HypothesisSpec::LinearBasis { input_dim, .. } => *input_dim,
            HypothesisSpec::OneHiddenLayer { input_dim, .. } => *input_dim,
        }
    }

    /// Number of parameters the family expects; fixed by the family arithmetic.
    pub fn param_dim(&self) -> usize {
        match self {
            HypothesisSpec::LinearBasis {
                input_dim,
                feature_map,
            } => match feature_map {
                FeatureMap::Raw => 1 + input_dim,
                FeatureMap::Polynomial { degree } => 1 + input_dim * degree,
                FeatureMap::Fourier { frequencies } => 1 + 2 * frequencies.len(),
            },
            HypothesisSpec::OneHiddenLayer {
                input_dim,
                hidden_width,
            } => hidden_width * (input_dim + 1) + hidden_width + 1,
        }
    }

    /// Feature vector of `x` for the linear family.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (input_dim, feature_map) = match self {
            HypothesisSpec::LinearBasis {
                input_dim,
                feature_map,
            } => (*input_dim, feature_map),
            HypothesisSpec::OneHiddenLayer { .. } => {
                return Err(Error::InvalidArgument(
                    "feature map is only defined for the linear-basis family".into(),
                ))
            }
        };
        if x.len() != input_dim {
            return Err(Error::InvalidArgument(format!(
                "input has dimension {}, expected {}",
                x.len(),
                input_dim
            )));
        }
        let mut phi = Vec::with_capacity(self.param_dim());
        phi.push(1.0);
        match feature_map {
            FeatureMap::Raw => phi.extend_from_slice(x),
            FeatureMap::Polynomial { degree } => {
                for &xi in x {
                    let mut p = 1.0;
                    for _ in 0..*degree {
                        p *= xi;
                        phi.push(p);
                    }
                }
            }
            FeatureMap::Fourier { frequencies } => {
                for w in frequencies {
                    let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
                    phi.push(z.cos());
                    phi.push(z.sin());
                }
            }
        }
        Ok(phi)
    }

    /// Evaluates `h(x; theta)`.
    pub fn predict(&self, theta: &ParameterVector, x: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        match self {
            HypothesisSpec::LinearBasis { .. } => {
                let phi = self.features(x)?;
                Ok(dot(theta.as_slice(), &phi))
            }
            HypothesisSpec::OneHiddenLayer {
                input_dim,
                hidden_width,
            } => {
                if x.len() != *input_dim {
                    return Err(Error::InvalidArgument(format!(
                        "input has dimension {}, expected {}",
                        x.len(),
                        input_dim
                    )));
                }
                let t = theta.as_slice();
                let (d, width) = (*input_dim, *hidden_width);
                let v_off = width * (d + 1);
                let mut acc = t[v_off + width]; // output bias
                for m in 0..width {
                    let base = m * (d + 1);
                    let z = dot(&t[base..base + d], x) + t[base + d];
                    acc += t[v_off + m] * z.tanh();
                }
                Ok(acc)
            }
        }
    }

    /// Gradient of the prediction with respect to the parameters.
    fn prediction_gradient(&self, theta: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            HypothesisSpec::LinearBasis { .. } => self.features(x),
            HypothesisSpec::OneHiddenLayer {
                input_dim,
                hidden_width,
            } => {
                let t = theta.as_slice();
                let (d, width) = (*input_dim, *hidden_width);
                let v_off = width * (d + 1);
                let mut grad = vec![0.0; self.param_dim()];
                for m in 0..width {
                    let base = m * (d + 1);
                    let z = dot(&t[base..base + d], x) + t[base + d];
                    let th = z.tanh();
                    let sech_sq = 1.0 - th * th;
                    let scale = t[v_off + m] * sech_sq;
                    for (j, &xj) in x.iter().enumerate() {
                        grad[base + j] = scale * xj;
                    }
                    grad[base + d] = scale;
                    grad[v_off + m] = th;
                }
                grad[v_off + width] = 1.0;
                Ok(grad)
            }
        }
    }

    fn check_theta(&self, theta: &ParameterVector) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has length {}, spec expects {}",
                theta.len(),
                self.param_dim()
            )));
        }
        Ok(())
    }
}

/// An agent's parameter estimate. Entries are always finite; a vector with
/// NaN or infinite coordinates cannot be constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "parameter vector entries must be finite".into(),
            ));
        }
        Ok(ParameterVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The loss quantifying lack of fit between prediction and observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    /// `(y - h)^2`
    Squared,
}

/// One agent's empirical risk: the shard-size-normalized mean of per-point
/// losses.
#[derive(Debug, Clone)]
pub struct LocalObjective {
    pub shard: DataShard,
    pub spec: HypothesisSpec,
    pub loss: Loss,
}

impl LocalObjective {
    pub fn new(shard: DataShard, spec: HypothesisSpec, loss: Loss) -> Result<Self> {
        if shard.dim() != spec.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "shard has input dimension {}, spec expects {}",
                shard.dim(),
                spec.input_dim()
            )));
        }
        Ok(LocalObjective { shard, spec, loss })
    }

    /// Mean squared loss over the shard; nonnegative, zero iff the shard is
    /// fit exactly.
    pub fn local_risk(&self, theta: &ParameterVector) -> Result<f64> {
        let mut acc = 0.0;
        for p in self.shard.points() {
            let r = self.spec.predict(theta, &p.x)? - p.y;
            acc += r * r;
        }
        let risk = acc / self.shard.len() as f64;
        if !risk.is_finite() {
            return Err(Error::NumericOverflow(
                "local risk is not finite".into(),
            ));
        }
        Ok(risk)
    }

    /// Analytic gradient of [`local_risk`](Self::local_risk):
    /// `(2/n) sum_j (h(x_j) - y_j) grad_theta h(x_j)`.
    pub fn risk_gradient(&self, theta: &ParameterVector) -> Result<ParameterVector> {
        let mut grad = vec![0.0; theta.len()];
        for p in self.shard.points() {
            let resid = self.spec.predict(theta, &p.x)? - p.y;
            let dh = self.spec.prediction_gradient(theta, &p.x)?;
            for (gi, di) in grad.iter_mut().zip(&dh) {
                *gi += resid * di;
            }
        }
        let scale = 2.0 / self.shard.len() as f64;
        for gi in grad.iter_mut() {
            *gi *= scale;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericOverflow(
                "risk gradient is not finite".into(),
            ));
        }
        ParameterVector::new(grad)
    }

    /// Empirical growth constant `max |grad J(theta)|^2 / (1 + |theta|^2)`
    /// over the sample. A reported diagnostic, not a proof of the growth
    /// condition.
    pub fn growth_diagnostic(&self, sample: &[ParameterVector]) -> Result<f64> {
        if sample.is_empty() {
            return Err(Error::InvalidArgument(
                "growth diagnostic needs a nonempty sample".into(),
            ));
        }
        let mut worst = 0.0f64;
        for theta in sample {
            let g = self.risk_gradient(theta)?;
            let num = g.norm().powi(2);
            let den = 1.0 + theta.norm().powi(2);
            worst = worst.max(num / den);
        }
        Ok(worst)
    }
}

/// Mean squared prediction error of `theta` over an arbitrary point set.
pub fn mean_squared_error(
    spec: &HypothesisSpec,
    theta: &ParameterVector,
    points: &[crate::data::DataPoint],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut acc = 0.0;
    for p in points {
        let r = spec.predict(theta, &p.x)? - p.y;
        acc += r * r;
    }
    Ok(acc / points.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(ai, bi)| ai * bi).sum()
}
