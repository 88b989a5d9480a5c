//! Linear layers, initialization, loss and the Adam optimizer.

use rand::distributions::{Distribution, Uniform};

use crate::autodiff::{ParamId, ParamStore, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl From<Activation> for Unary {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Relu => Unary::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(−√(1/in), √(1/in))` weights, zero bias.
    #[default]
    UniformFanIn,
    /// All-zero weights and bias.
    Zeros,
}

/// `y = act(x·W + b)` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Option<Activation>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Draws the weight matrix for a layer; the values depend only on `seed`.
pub fn init_weights<T: Scalar>(in_dim: usize, out_dim: usize, seed: u64, scheme: InitScheme) -> Result<Tensor<T>> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "linear layer dims must be >= 1, got {in_dim}x{out_dim}"
        )));
    }
    let data = match scheme {
        InitScheme::Zeros => vec![T::zero(); in_dim * out_dim],
        InitScheme::UniformFanIn => {
            let bound = (1.0 / in_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut rng = seed::rng(seed, &[]);
            (0..in_dim * out_dim).map(|_| T::of(dist.sample(&mut rng))).collect()
        }
    };
    Tensor::new(vec![in_dim, out_dim], data)
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Option<Activation>,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        let w = init_weights(in_dim, out_dim, seed, scheme)?;
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Ok(Linear {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        Ok(match self.activation {
            Some(a) => tape.unary(a.into(), y),
            None => y,
        })
    }

    /// Overwrites weight and bias with zeros.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in std::iter::once(self.weight).chain(self.bias) {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Mean softmax cross-entropy of `[batch, classes]` logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 term added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update from the gradients held in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} is not finite", p.name)));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i] + wd * *theta;
                let mi = b1 * m.data()[i] + one_b1 * g;
                let vi = b2 * v.data()[i] + one_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, DEFAULT_STEP};

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let la = Linear::init(&mut a, "l", 5, 3, true, None, 11, InitScheme::UniformFanIn).unwrap();
        Linear::init(&mut b, "l", 5, 3, true, None, 11, InitScheme::UniformFanIn).unwrap();
        assert_eq!(a, b);
        assert!(a.get(la.bias.unwrap()).value.data().iter().all(|&v| v == 0.0));
        let bound = (1.0f32 / 5.0).sqrt();
        assert!(a.get(la.weight).value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_weights::<f32>(0, 3, 1, InitScheme::UniformFanIn).is_err());
        assert!(init_weights::<f32>(3, 0, 1, InitScheme::Zeros).is_err());
    }

    #[test]
    fn init_variance_matches_uniform_moments() {
        let in_dim = 16;
        let w = init_weights::<f64>(in_dim, 625, 3, InitScheme::UniformFanIn).unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / 3.0 / in_dim as f64;
        assert!((var - expected).abs() / expected < 0.1, "var {var} vs {expected}");
    }

    #[test]
    fn cross_entropy_values() {
        let l = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert!((cross_entropy(&l, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = Tensor::<f64>::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap();
        assert!(cross_entropy(&l, &[0]).unwrap().abs() < 1e-12);
        assert!(cross_entropy(&l, &[5]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut params = ParamStore::new();
        params.add(
            "logits",
            Tensor::from_f64(&[3, 4], &[0.3, -1.2, 2.0, 0.1, 1.5, 0.2, -0.7, 0.9, -2.0, 0.4, 0.0, 1.1]).unwrap(),
        );
        let report = finite_difference_check(
            |tape, p| {
                let l = tape.param(p, p.find("logits").unwrap());
                tape.cross_entropy(l, &[2, 0, 3])
            },
            &params,
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let l = Tensor::<f64>::from_f64(&[1, 3], &[0.2, -1.0, 3.0]).unwrap();
        let shifted = l.map(|v| v + 7.5);
        let d = cross_entropy(&l, &[1]).unwrap() - cross_entropy(&shifted, &[1]).unwrap();
        assert!(d.abs() < 1e-6);
    }

    fn store_with_grad(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[2], &[value, -value]).unwrap());
        s.get_mut(id).grad = Tensor::from_f64(&[2], &[grad, -grad]).unwrap();
        s
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let g = 0.37;
        let mut s = store_with_grad(1.0, g);
        let mut adam = AdamState::new(cfg, &s);
        adam.step(&mut s).unwrap();
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        let got = s.iter().next().unwrap().value.data().to_vec();
        assert!((got[0] - expected).abs() < 1e-15, "{} vs {}", got[0], expected);
        assert!((got[1] + expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut s = store_with_grad(0.25, 0.0);
        let before = s.clone();
        let mut adam = AdamState::new(cfg, &s);
        for _ in 0..3 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value, before.iter().next().unwrap().value);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut s = store_with_grad(1.0, f64::INFINITY);
        let before = s.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        assert!(matches!(adam.step(&mut s), Err(Error::NonFinite(_))));
        assert_eq!(s, before);
        assert_eq!(adam.steps(), 0);
    }
}
