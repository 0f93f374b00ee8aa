//! Learnable descriptor embedding with manual backpropagation.
//!
//! `embed` maps a raw descriptor through a linear layer (or a one-hidden-layer
//! tanh MLP) and projects the result onto the unit sphere. Parameters live in
//! one flat vector so the optimizer and checkpoints treat them uniformly.
//!
//! Layout of the flat parameter vector (row-major weights):
//!
//! * linear: `W (s × d_in)`, `b (s)`
//! * mlp:    `W1 (h × d_in)`, `b1 (h)`, `W2 (s × h)`, `b2 (s)`

use std::ops::Deref;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which the pre-normalization output is considered collapsed.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    #[serde(flatten)]
    pub architecture: Architecture,
    pub d_in: usize,
    /// Output feature dimension.
    pub s: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::Config(format!("feature dimension s must be >= 2, got {}", self.s)));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be >= 1".into()));
        }
        if let Architecture::Mlp { hidden } = self.architecture {
            if hidden == 0 {
                return Err(Error::Config("mlp hidden width must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.architecture {
            Architecture::Linear => self.s * self.d_in + self.s,
            Architecture::Mlp { hidden } => {
                hidden * self.d_in + hidden + self.s * hidden + self.s
            }
        }
    }
}

/// Unit-norm embedded vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(DVector<f64>);

impl Feature {
    /// Normalizes `v`, failing when its norm is below [`MIN_NORM`].
    pub fn normalize(v: DVector<f64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || norm < MIN_NORM {
            return Err(Error::DegenerateEmbedding { norm });
        }
        Ok(Self(v / norm))
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for Feature {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Forward-pass intermediates needed by [`Embedder::backward`].
#[derive(Debug, Clone)]
pub struct Activation {
    input: DVector<f64>,
    /// Post-tanh hidden layer (mlp only).
    hidden: Option<DVector<f64>>,
    norm: f64,
    feature: Feature,
    version: u64,
}

impl Activation {
    pub fn feature(&self) -> &Feature {
        &self.feature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    spec: EmbedderSpec,
    params: Vec<f64>,
    /// Bumped on every parameter update; activations remember the version
    /// they were computed with.
    #[serde(skip)]
    version: u64,
}

impl Embedder {
    /// Gaussian init with variance `1 / fan_in`, zero biases.
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.param_count());
        let mut layer = |rows: usize, cols: usize, params: &mut Vec<f64>| {
            let scale = (1.0 / cols as f64).sqrt();
            for _ in 0..rows * cols {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, rows));
        };
        match spec.architecture {
            Architecture::Linear => layer(spec.s, spec.d_in, &mut params),
            Architecture::Mlp { hidden } => {
                layer(hidden, spec.d_in, &mut params);
                layer(spec.s, hidden, &mut params);
            }
        }
        Ok(Self {
            spec,
            params,
            version: 0,
        })
    }

    pub fn from_params(spec: EmbedderSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a spec needing {}",
                params.len(),
                spec.param_count()
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self {
            spec,
            params,
            version: 0,
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding activations.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn affine(&self, offset: usize, rows: usize, cols: usize, x: &DVector<f64>) -> DVector<f64> {
        let w = &self.params[offset..offset + rows * cols];
        let b = &self.params[offset + rows * cols..offset + rows * cols + rows];
        DVector::from_iterator(
            rows,
            (0..rows).map(|i| {
                let row = &w[i * cols..(i + 1) * cols];
                b[i] + row.iter().zip(x.iter()).map(|(a, c)| a * c).sum::<f64>()
            }),
        )
    }

    pub fn forward(&self, descriptor: &[f64]) -> Result<Activation> {
        if descriptor.len() != self.spec.d_in {
            return Err(Error::Shape(format!(
                "descriptor has dimension {}, embedder expects {}",
                descriptor.len(),
                self.spec.d_in
            )));
        }
        let input = DVector::from_column_slice(descriptor);
        let (hidden, y) = match self.spec.architecture {
            Architecture::Linear => (None, self.affine(0, self.spec.s, self.spec.d_in, &input)),
            Architecture::Mlp { hidden } => {
                let h = self
                    .affine(0, hidden, self.spec.d_in, &input)
                    .map(f64::tanh);
                let offset = hidden * self.spec.d_in + hidden;
                let y = self.affine(offset, self.spec.s, hidden, &h);
                (Some(h), y)
            }
        };
        let norm = y.norm();
        let feature = Feature::normalize(y)?;
        Ok(Activation {
            input,
            hidden,
            norm,
            feature,
            version: self.version,
        })
    }

    pub fn embed(&self, descriptor: &[f64]) -> Result<Feature> {
        Ok(self.forward(descriptor)?.feature)
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂f` for one forward pass.
    ///
    /// The unit-normalization Jacobian `(I − f fᵀ)/‖y‖` is applied first, so
    /// any component of `grad_feature` along `f` itself has no effect.
    pub fn backward(
        &self,
        act: &Activation,
        grad_feature: &DVector<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        if act.version != self.version {
            return Err(Error::Contract(
                "activation predates the latest parameter update".into(),
            ));
        }
        if grads.len() != self.params.len() || grad_feature.len() != self.spec.s {
            return Err(Error::Shape("gradient buffer does not match embedder".into()));
        }
        let f: &DVector<f64> = &act.feature;
        let g_y = (grad_feature - f * f.dot(grad_feature)) / act.norm;
        match (self.spec.architecture, &act.hidden) {
            (Architecture::Linear, _) => {
                accumulate_affine(grads, 0, &g_y, &act.input);
            }
            (Architecture::Mlp { hidden }, Some(h)) => {
                let offset = hidden * self.spec.d_in + hidden;
                accumulate_affine(grads, offset, &g_y, h);
                let w2 = &self.params[offset..offset + self.spec.s * hidden];
                let g_h = DVector::from_iterator(
                    hidden,
                    (0..hidden).map(|j| {
                        let back: f64 = (0..self.spec.s).map(|i| w2[i * hidden + j] * g_y[i]).sum();
                        back * (1.0 - h[j] * h[j])
                    }),
                );
                accumulate_affine(grads, 0, &g_h, &act.input);
            }
            (Architecture::Mlp { .. }, None) => {
                return Err(Error::Contract("mlp activation lacks hidden layer".into()))
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Self::from_params(ckpt.spec, ckpt.params)
    }
}

/// `dW += g xᵀ`, `db += g` for a layer stored at `offset`.
fn accumulate_affine(grads: &mut [f64], offset: usize, g: &DVector<f64>, x: &DVector<f64>) {
    let (rows, cols) = (g.len(), x.len());
    for i in 0..rows {
        let row = &mut grads[offset + i * cols..offset + (i + 1) * cols];
        for (r, xj) in row.iter_mut().zip(x.iter()) {
            *r += g[i] * xj;
        }
        grads[offset + rows * cols + i] += g[i];
    }
}

const CHECKPOINT_FORMAT: &str = "voloc-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: EmbedderSpec,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam update. A non-finite gradient aborts the step and leaves both
    /// the parameters and the optimizer state untouched.
    pub fn step(&mut self, embedder: &mut Embedder, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != embedder.params.len() {
            return Err(Error::Shape("gradient length does not match parameters".into()));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient, step aborted".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = embedder.params_mut();
        for (k, &g) in grads.iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d: usize, s: usize) -> EmbedderSpec {
        EmbedderSpec {
            architecture: Architecture::Linear,
            d_in: d,
            s,
            seed: 3,
        }
    }

    #[test]
    fn identity_linear_passes_unit_vector() {
        let spec = linear(3, 3);
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let e = Embedder::from_params(spec, params).unwrap();
        let f = e.embed(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn outputs_are_unit_norm_and_repeatable() {
        let e = Embedder::new(EmbedderSpec {
            architecture: Architecture::Mlp { hidden: 8 },
            ..linear(5, 4)
        })
        .unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.0];
        let a = e.embed(&x).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a, e.embed(&x).unwrap());
    }

    #[test]
    fn zero_output_is_degenerate() {
        let spec = linear(2, 2);
        let e = Embedder::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
        assert!(matches!(
            e.embed(&[1.0, 1.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let e = Embedder::new(EmbedderSpec {
            architecture: Architecture::Mlp { hidden: 3 },
            ..linear(4, 3)
        })
        .unwrap();
        let act = e.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = e.zero_grad();
        e.backward(&act, &DVector::zeros(3), &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radial_gradient_is_annihilated() {
        let e = Embedder::new(linear(4, 3)).unwrap();
        let act = e.forward(&[1.0, -2.0, 0.5, 4.0]).unwrap();
        let mut g = e.zero_grad();
        let radial: DVector<f64> = act.feature().clone().into_inner() * 3.7;
        e.backward(&act, &radial, &mut g).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stale_activation_rejected() {
        let mut e = Embedder::new(linear(2, 2)).unwrap();
        let act = e.forward(&[1.0, 0.5]).unwrap();
        let n = e.params().len();
        let mut adam = Adam::new(1e-3, n);
        adam.step(&mut e, &vec![1.0; n]).unwrap();
        let mut g = e.zero_grad();
        assert!(matches!(
            e.backward(&act, &DVector::from_element(2, 1.0), &mut g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut e = Embedder::new(linear(3, 2)).unwrap();
        let before = e.params().to_vec();
        let mut adam = Adam::new(1e-3, before.len());
        adam.step(&mut e, &vec![0.0; before.len()]).unwrap();
        assert_eq!(e.params(), &before[..]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut e = Embedder::new(linear(3, 2)).unwrap();
        let before = e.params().to_vec();
        let mut adam = Adam::new(1e-3, before.len());
        let mut g = vec![0.1; before.len()];
        g[2] = f64::NAN;
        assert!(matches!(adam.step(&mut e, &g), Err(Error::Numeric(_))));
        assert_eq!(e.params(), &before[..]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let e = Embedder::new(EmbedderSpec {
            architecture: Architecture::Mlp { hidden: 5 },
            ..linear(4, 3)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        e.save(&path).unwrap();
        let back = Embedder::load(&path).unwrap();
        assert_eq!(back.params(), e.params());
        assert_eq!(back.spec(), e.spec());
    }

    #[test]
    fn spec_validation() {
        assert!(Embedder::new(linear(3, 1)).is_err());
        assert!(Embedder::new(EmbedderSpec {
            architecture: Architecture::Mlp { hidden: 0 },
            ..linear(3, 3)
        })
        .is_err());
    }
}
