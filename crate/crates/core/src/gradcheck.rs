//! Central finite-difference verification of tape gradients (64-bit only).

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Gabmil;
use crate::seed;
use crate::simm::GridLayout;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", format!("loss has shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, element by element, for every
/// parameter in `params`.
pub fn finite_difference_check<F>(f: F, params: &ParamStore<f64>, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    for p in params.iter() {
        if !p.value.all_finite() {
            return Err(Error::NonFinite(format!("parameter {} holds non-finite values", p.name)));
        }
    }

    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &analytic)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        let grads = tape.backward(loss)?;
        tape.accumulate(&grads, &mut analytic);
    }

    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut worst = 0.0f64;
        for i in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&f, &probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&f, &probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).grad.data()[i];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of {}[{}] is {}",
                    params.get(id).name,
                    i,
                    a
                )));
            }
            worst = worst.max(relative_error(a, numeric));
        }
        per_param.push(ParamError {
            name: params.get(id).name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { per_param, tolerance })
}

/// Overwrites every parameter with `U(-1, 1)` draws. At the default init the
/// attention is nearly uniform and some gradients sit near 1e-9, below what
/// central differences at `h = 1e-5` can resolve.
pub fn randomize_params(params: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seed::rng(seed, &[0x67_63]);
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

/// Checks every parameter gradient of the full model's cross-entropy on one bag.
pub fn check_gabmil(
    model: &Gabmil<f64>,
    features: &Tensor<f64>,
    layout: &GridLayout,
    label: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    finite_difference_check(
        |tape, params| {
            let x = tape.input(features.clone());
            let trace = model.forward_on(tape, params, x, layout)?;
            tape.cross_entropy(trace.logits, &[label])
        },
        &model.store,
        h,
        tolerance,
    )
}
