//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Probe a random subset of this many coordinates instead of all.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Max of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(input, flat index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            probes: 0,
            worst: None,
        }
    }

    fn push(&mut self, analytic: f64, numeric: f64, at: (usize, usize)) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let err = (analytic - numeric).abs() / denom;
        self.probes += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(at);
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradcheck eps must lie in [1e-7, 1e-3], got {eps}"
        )))
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let y = tape.value(v).item()?;
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::NonFinite("function value while probing".into()))
    }
}

fn probe_set(total: usize, opts: &GradcheckOptions) -> Vec<usize> {
    match opts.max_probes {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

/// Compares the tape gradient of a scalar function of `inputs` with central
/// differences.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], opts: &GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(inputs, opts, f, |_, _| false)
}

/// [`gradcheck`] skipping coordinates for which `exclude(input, index)`
/// holds, e.g. non-differentiable points.
pub fn gradcheck_with<F, E>(
    inputs: &[Tensor<f64>],
    opts: &GradcheckOptions,
    f: F,
    exclude: E,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    E: Fn(usize, usize) -> bool,
{
    check_eps(opts.eps)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(|t| t.numel()).sum();

    let mut report = GradcheckReport::new();
    let mut work = inputs.to_vec();
    for flat in probe_set(total, opts) {
        let i = offsets.iter().rposition(|&o| o <= flat).expect("offset 0 exists");
        let j = flat - offsets[i];
        if exclude(i, j) {
            continue;
        }
        let analytic = grads.wrt(vars[i]).map_or(0.0, |g| g.data()[j]);
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + opts.eps;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = x0 - opts.eps;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = x0;
        report.push(analytic, (fp - fm) / (2.0 * opts.eps), (i, j));
    }
    Ok(report)
}

// Positive weights: a signed cotangent can cancel a coordinate's gradient
// down to the finite-difference noise floor.
fn cotangent(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    Tensor::from_vec(shape, data).expect("non-empty shape")
}

/// Checks a tensor-valued `f` through its vector-Jacobian product with a
/// fixed random cotangent `w`: the scalar probed is `Σ w ⊙ (f(x) − f(x₀))`.
///
/// Centring on the unperturbed output keeps the rounding noise of the
/// probed value proportional to the outputs the perturbation touches.
pub fn gradcheck_map<F, E>(
    inputs: &[Tensor<f64>],
    opts: &GradcheckOptions,
    f: F,
    exclude: E,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    E: Fn(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let center = tape.value(y).clone();
    let w = cotangent(center.shape(), opts.seed ^ 0x5EED);
    gradcheck_with(
        inputs,
        opts,
        |t, v| {
            let y = f(t, v)?;
            t.weighted_sum_about(y, w.clone(), &center)
        },
        exclude,
    )
}

/// [`gradcheck_params`] for a tensor-valued `f`, probed like
/// [`gradcheck_map`].
pub fn gradcheck_params_map<F>(
    store: &ParamStore<f64>,
    probes: &[(ParamId, usize)],
    eps: f64,
    seed: u64,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let center = tape.value(y).clone();
    let w = cotangent(center.shape(), seed ^ 0x5EED);
    gradcheck_params(store, probes, eps, |t, s| {
        let y = f(t, s)?;
        t.weighted_sum_about(y, w.clone(), &center)
    })
}

/// Gradcheck over selected parameter entries `(parameter, flat index)`.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    probes: &[(ParamId, usize)],
    eps: f64,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    grads.accumulate_into(&mut analytic_store);

    let mut report = GradcheckReport::new();
    let mut work = store.clone();
    for &(id, j) in probes {
        let analytic = analytic_store.get(id).grad.data()[j];
        let x0 = work.get(id).value.data()[j];
        let mut eval_at = |x: f64| -> Result<f64> {
            work.get_mut(id).value.data_mut()[j] = x;
            let mut t = Tape::new();
            let y = f(&mut t, &work)?;
            scalar_of(&t, y)
        };
        let fp = eval_at(x0 + eps)?;
        let fm = eval_at(x0 - eps)?;
        work.get_mut(id).value.data_mut()[j] = x0;
        report.push(analytic, (fp - fm) / (2.0 * eps), (id.index(), j));
    }
    Ok(report)
}
