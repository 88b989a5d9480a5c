//! Attention pooling, classifier head and the full model:
//! compress → spatial mixing → attention pool → classifier.

use std::fmt::Write as _;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activation, InitScheme, Linear};
use crate::seed;
use crate::simm::{GridCoord, GridLayout, Simm, SimmConfig, SimmVariant};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GabmilConfig {
    pub input_dim: usize,
    pub compressed_dim: usize,
    pub attention_dim: usize,
    pub num_classes: usize,
    /// `tanh(V·h) ⊙ sigmoid(U·h)` scoring instead of plain `tanh(V·h)`.
    pub gated: bool,
    pub simm: SimmConfig,
}

impl Default for GabmilConfig {
    fn default() -> Self {
        GabmilConfig {
            input_dim: 1024,
            compressed_dim: 512,
            attention_dim: 256,
            num_classes: 2,
            gated: true,
            simm: SimmConfig::default(),
        }
    }
}

impl GabmilConfig {
    /// Small dims used for the synthetic benchmark bags (64 features).
    pub fn synthetic() -> Self {
        GabmilConfig {
            input_dim: 64,
            compressed_dim: 16,
            attention_dim: 8,
            ..Self::default()
        }
    }

    pub fn with_simm(mut self, simm: SimmConfig) -> Self {
        self.simm = simm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.compressed_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("model dims must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        self.simm.validate()
    }
}

/// Attention-weighted sum of instance embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPool {
    pub v: Linear,
    pub u: Option<Linear>,
    /// Score vector; no bias since softmax ignores constant shifts.
    pub w: Linear,
}

impl AttentionPool {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        dim: usize,
        hidden: usize,
        gated: bool,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        let v = Linear::init(store, "attn.v", dim, hidden, true, Some(Activation::Tanh), seed::derive(seed, &[1]), scheme)?;
        let u = gated
            .then(|| {
                Linear::init(store, "attn.u", dim, hidden, true, Some(Activation::Sigmoid), seed::derive(seed, &[2]), scheme)
            })
            .transpose()?;
        let w = Linear::init(store, "attn.w", hidden, 1, false, None, seed::derive(seed, &[3]), scheme)?;
        Ok(AttentionPool { v, u, w })
    }

    /// Returns `(pooled [1, D], weights [N, 1])`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<(Var, Var)> {
        if tape.shape(h).first() == Some(&0) {
            return Err(Error::EmptyBag);
        }
        let mut a = self.v.forward(tape, store, h)?;
        if let Some(u) = &self.u {
            let gate = u.forward(tape, store, h)?;
            a = tape.mul(a, gate)?;
        }
        let scores = self.w.forward(tape, store, a)?;
        let weights = tape.softmax(scores, 0)?;
        let wt = tape.permute(weights, &[1, 0])?;
        let pooled = tape.matmul(wt, h)?;
        Ok((pooled, weights))
    }
}

/// Plain-tensor attention pooling: `(pooled [D], weights [N])`.
pub fn attention_pool<T: Scalar>(
    embeddings: &Tensor<T>,
    pool: &AttentionPool,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = embeddings.dims2("attention_pool")?;
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    let mut tape = Tape::new();
    let h = tape.input(embeddings.clone());
    let (pooled, weights) = pool.forward(&mut tape, store, h)?;
    Ok((tape.value(pooled).reshape(&[d])?, tape.value(weights).reshape(&[n])?))
}

/// Variables recorded by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    /// Compressed embeddings entering the mixing module `[N, D]`.
    pub compressed: Var,
    /// Embeddings after mixing and residual `[N, D]`.
    pub mixed: Var,
    /// Attention weights `[N, 1]`.
    pub weights: Var,
    /// Logits `[1, K]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Gabmil<T> {
    pub config: GabmilConfig,
    pub store: ParamStore<T>,
    pub compress: Linear,
    pub simm: Simm,
    pub pool: AttentionPool,
    pub classifier: Linear,
}

impl<T: Scalar> Gabmil<T> {
    pub fn new(config: GabmilConfig, seed: u64) -> Result<Self> {
        Self::with_scheme(config, seed, InitScheme::UniformFanIn)
    }

    /// Non-mixing layers draw from the same streams for every variant, so two
    /// models built from one seed share everything but their mixers.
    pub fn with_scheme(config: GabmilConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let compress = Linear::init(
            &mut store,
            "compress",
            config.input_dim,
            config.compressed_dim,
            true,
            Some(Activation::Relu),
            seed::derive(seed, &[1]),
            scheme,
        )?;
        let simm = Simm::init(&mut store, config.simm, seed::derive(seed, &[2]), scheme)?;
        let pool = AttentionPool::init(
            &mut store,
            config.compressed_dim,
            config.attention_dim,
            config.gated,
            seed::derive(seed, &[3]),
            scheme,
        )?;
        let classifier = Linear::init(
            &mut store,
            "classifier",
            config.compressed_dim,
            config.num_classes,
            true,
            None,
            seed::derive(seed, &[4]),
            scheme,
        )?;
        Ok(Gabmil {
            config,
            store,
            compress,
            simm,
            pool,
            classifier,
        })
    }

    pub fn zero_mixers(&mut self) {
        self.simm.zero(&mut self.store);
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) {
        for p in self.store.iter_mut() {
            if let Some(id) = other.find(&p.name) {
                p.value = other.get(id).value.clone();
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Gabmil<U> {
        Gabmil {
            config: self.config,
            store: self.store.cast(),
            compress: self.compress.clone(),
            simm: self.simm.clone(),
            pool: self.pool.clone(),
            classifier: self.classifier.clone(),
        }
    }

    /// Records the full forward pass for one bag.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        layout: &GridLayout,
    ) -> Result<ForwardTrace> {
        let (n, c) = match tape.shape(features) {
            &[n, c] => (n, c),
            s => return Err(Error::shape("gabmil", format!("expected [N, C] features, got {s:?}"))),
        };
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        if c != self.config.input_dim {
            return Err(Error::Dimension {
                op: "gabmil input",
                lhs: vec![n, c],
                rhs: vec![n, self.config.input_dim],
            });
        }
        let compressed = self.compress.forward(tape, store, features)?;
        let mixed = if self.config.simm.variant == SimmVariant::None {
            compressed
        } else {
            self.simm.forward(tape, store, compressed, layout)?.output
        };
        let (pooled, weights) = self.pool.forward(tape, store, mixed)?;
        let logits = self.classifier.forward(tape, store, pooled)?;
        Ok(ForwardTrace {
            compressed,
            mixed,
            weights,
            logits,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, features: &Tensor<T>, layout: &GridLayout) -> Result<ForwardTrace> {
        let x = tape.input(features.clone());
        self.forward_on(tape, &self.store, x, layout)
    }

    /// `(logits [K], attention weights [N])` for one bag.
    pub fn logits(&self, features: &Tensor<T>, layout: &GridLayout) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, features, layout)?;
        let n = layout.len();
        Ok((
            tape.value(trace.logits).reshape(&[self.config.num_classes])?,
            tape.value(trace.weights).reshape(&[n])?,
        ))
    }

    /// Cross-entropy of one bag; gradients are added to the parameter store.
    pub fn accumulate_loss_grad(&mut self, features: &Tensor<T>, layout: &GridLayout, label: usize) -> Result<T> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, features, layout)?;
        let loss = tape.cross_entropy(trace.logits, &[label])?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        tape.accumulate(&grads, &mut self.store);
        Ok(value)
    }

    pub fn loss(&self, features: &Tensor<T>, layout: &GridLayout, label: usize) -> Result<T> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, features, layout)?;
        let loss = tape.cross_entropy(trace.logits, &[label])?;
        Ok(tape.value(loss).item())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        checkpoint::encode(&self.store)
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = checkpoint::decode(bytes)?;
        checkpoint::load_into(&entries, &mut self.store)
    }
}

/// Thresholded decision for a binary model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probability: f64,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Positive-class probability `softmax(logits)[1]`; class 1 iff it is
/// strictly above 0.5.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Prediction> {
    if logits.len() != 2 {
        return Err(Error::shape(
            "predict",
            format!("thresholded prediction needs 2 logits, got {:?}", logits.shape()),
        ));
    }
    let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let p = positive_probability(l[0], l[1]);
    Ok(Prediction {
        label: usize::from(p > DECISION_THRESHOLD),
        probability: p,
    })
}

fn positive_probability(l0: f64, l1: f64) -> f64 {
    let d = l0 - l1;
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Per-instance attention as text lines `index\trow\tcol\tweight`.
pub fn format_attention<T: Scalar>(coords: &[GridCoord], weights: &Tensor<T>) -> String {
    let mut out = String::from("# index\trow\tcol\tweight\n");
    for (i, (c, w)) in coords.iter().zip(weights.data()).enumerate() {
        let _ = writeln!(out, "{i}\t{}\t{}\t{:.8e}", c.row, c.col, w.as_f64());
    }
    out
}
