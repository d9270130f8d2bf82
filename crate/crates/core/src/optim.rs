//! Adam, the unsupervised training loop, lambda grid search and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{record_total_loss, MindConfig};
use crate::metrics::{evaluate_pair, EvalReport};
use crate::network::{default_scale_channels, Network, NetworkConfig, Variant};
use crate::volgrid::{LabelMask, Volume};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
///
/// Fails without touching anything if any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((x, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * g;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * g * g;
            *mi = T::lit(mn);
            *vi = T::lit(vn);
            let step = state.lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *x = T::lit(x.as_f64() - step);
        }
    }
    params.zero_grad();
    Ok(())
}

/// Training configuration as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "N")]
    pub n: usize,
    /// Defaults to `[16, 16, 32, 32]` truncated to `N`.
    #[serde(default)]
    pub scale_channels: Option<Vec<usize>>,
    #[serde(default = "default_fr_channels")]
    pub fr_channels: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub mind: MindConfig,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_fr_channels() -> usize {
    16
}

impl TrainConfig {
    pub fn new(n: usize, variant: Variant, lambda: f64, iterations: usize, seed: u64) -> Self {
        Self {
            n,
            scale_channels: None,
            fr_channels: 16,
            variant,
            lambda,
            lr: 1e-5,
            iterations,
            seed,
            mind: MindConfig::default(),
            checkpoint_every: 0,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            n: self.n,
            fr_channels: self.fr_channels,
            scale_channels: self
                .scale_channels
                .clone()
                .unwrap_or_else(|| default_scale_channels(self.n)),
            variant: self.variant,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.mind.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A moving/fixed image pair.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub moving: Volume,
    pub fixed: Volume,
}

/// A pair with segmentations, for evaluation.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: LabelMask,
    pub fixed_labels: LabelMask,
}

impl EvalPair {
    pub fn images(&self) -> TrainPair {
        TrainPair {
            moving: self.moving.clone(),
            fixed: self.fixed.clone(),
        }
    }
}

struct Prepared {
    moving: Tensor<f32>,
    fixed: Tensor<f32>,
    fixed_mind: Tensor<f32>,
}

/// Network plus optimizer state; one `step` is one Adam iteration.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub adam: AdamState<f32>,
    data: Vec<Prepared>,
}

impl Trainer {
    pub fn new(config: TrainConfig, pairs: &[TrainPair]) -> Result<Self> {
        config.validate()?;
        let net = Network::build(&config.network())?;
        let adam = AdamState::new(net.params(), config.lr);
        Self::with_state(config, net, adam, pairs)
    }

    /// Continues from a network and optimizer state, e.g. a checkpoint.
    pub fn with_state(
        config: TrainConfig,
        net: Network,
        adam: AdamState<f32>,
        pairs: &[TrainPair],
    ) -> Result<Self> {
        config.validate()?;
        if net.config() != &config.network() {
            return Err(Error::InvalidArgument(
                "network configuration does not match the training configuration".into(),
            ));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one pair".into()));
        }
        let mut data = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.moving.shape() != p.fixed.shape() {
                return Err(Error::Shape(format!(
                    "moving {:?} and fixed {:?} differ",
                    p.moving.shape(),
                    p.fixed.shape()
                )));
            }
            config.network().check_shape(p.moving.shape())?;
            let fixed = p.fixed.to_tensor::<f32>();
            let mut tape = Tape::<f32>::new();
            let fv = tape.constant(fixed.clone());
            let m = tape.mind(fv, &config.mind)?;
            data.push(Prepared {
                moving: p.moving.to_tensor(),
                fixed,
                fixed_mind: tape.value(m).clone(),
            });
        }
        Ok(Self {
            config,
            net,
            adam,
            data,
        })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.adam.t as usize
    }

    /// Runs one iteration on the next pair (round-robin) and returns its
    /// loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let iteration = self.iteration();
        let pair = &self.data[iteration % self.data.len()];
        let numeric = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { iteration },
            other => other,
        };
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(pair.moving.clone());
        let f = tape.constant(pair.fixed.clone());
        let params = self.net.params();
        let phi = self.net.forward_on(&mut tape, params, m, f).map_err(numeric)?;
        let loss = record_total_loss(
            &mut tape,
            &pair.moving,
            &pair.fixed_mind,
            phi,
            self.config.lambda,
            &self.config.mind,
        )
        .map_err(numeric)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let grads = tape.backward(loss)?;
        let store = self.net.params_mut();
        grads.accumulate_into(store);
        drop(grads);
        adam_step(store, &mut self.adam).map_err(numeric)?;
        Ok(value)
    }

    /// Runs the remaining iterations; `on_step(iteration, loss, trainer)` is
    /// called after every update.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(usize, f64, &Trainer) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.config.iterations);
        while self.iteration() < self.config.iterations {
            let it = self.iteration();
            let loss = self.step()?;
            losses.push(loss);
            on_step(it, loss, self)?;
        }
        Ok(losses)
    }
}

/// Trains from scratch and returns the network and the loss curve.
pub fn train(pairs: &[TrainPair], cfg: &TrainConfig) -> Result<(Network, Vec<f64>)> {
    let mut trainer = Trainer::new(cfg.clone(), pairs)?;
    let losses = trainer.run(|_, _, _| Ok(()))?;
    Ok((trainer.net, losses))
}

// ---------------------------------------------------------------------------
// Lambda grid search

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub mean_dice: f64,
    pub jacobian_std: f64,
    pub folding_count: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaSearch {
    pub best: f64,
    pub table: Vec<LambdaRow>,
}

/// The lambda with the highest score; ties go to the smaller lambda.
pub fn select_lambda(scores: &[(f64, f64)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(lambda, score) in scores {
        best = match best {
            Some((bl, bs)) if score < bs || (score == bs && lambda >= bl) => Some((bl, bs)),
            _ => Some((lambda, score)),
        };
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::InvalidArgument("lambda grid is empty".into()))
}

/// Trains one model per lambda and ranks them by mean Dice on `eval_set`.
pub fn grid_search_lambda(
    values: &[f64],
    cfg: &TrainConfig,
    train_set: &[TrainPair],
    eval_set: &[EvalPair],
) -> Result<LambdaSearch> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut table = Vec::with_capacity(values.len());
    for &lambda in values {
        let cfg = TrainConfig {
            lambda,
            ..cfg.clone()
        };
        let (net, losses) = train(train_set, &cfg)?;
        let reports = evaluate_set(&net, eval_set)?;
        let k = reports.len() as f64;
        table.push(LambdaRow {
            lambda,
            mean_dice: reports.iter().map(EvalReport::mean_dice).sum::<f64>() / k,
            jacobian_std: reports.iter().map(|r| r.jacobian_std).sum::<f64>() / k,
            folding_count: reports.iter().map(|r| r.folding_count).sum(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    let scores: Vec<(f64, f64)> = table.iter().map(|r| (r.lambda, r.mean_dice)).collect();
    Ok(LambdaSearch {
        best: select_lambda(&scores)?,
        table,
    })
}

/// Registers and scores every pair.
pub fn evaluate_set(net: &Network, set: &[EvalPair]) -> Result<Vec<EvalReport>> {
    set.iter()
        .map(|p| {
            let field = net.register(&p.moving, &p.fixed)?;
            evaluate_pair(&field, &p.moving_labels, &p.fixed_labels, p.fixed.spacing_mm())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamManifest {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
    adam: AdamManifest,
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut bin = base.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

/// Writes `<path>.json` (manifest) and `<path>.bin` (parameters, then Adam
/// first moments, then second moments, as little-endian f32).
pub fn save_checkpoint(net: &Network, adam: &AdamState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(path.as_ref());
    let entries: Vec<TensorEntry> = net
        .params()
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let prefixed = |prefix: &str| {
        entries
            .iter()
            .map(|e| TensorEntry {
                name: format!("{prefix}/{}", e.name),
                shape: e.shape.clone(),
            })
            .collect()
    };
    let manifest = Manifest {
        network: net.config().clone(),
        tensors: entries.clone(),
        adam: AdamManifest {
            t: adam.t,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            m: prefixed("m"),
            v: prefixed("v"),
        },
    };
    let mut blob = Vec::with_capacity(12 * net.count_parameters());
    let tensors = net
        .params()
        .iter()
        .map(|p| &p.value)
        .chain(&adam.m)
        .chain(&adam.v);
    for t in tensors {
        blob.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
}

fn read_tensors(
    entries: &[TensorEntry],
    blob: &[u8],
    offset: &mut usize,
) -> Vec<(String, Tensor<f32>)> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let bytes = &blob[*offset..*offset + 4 * n];
            *offset += 4 * n;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&e.shape, data).expect("size checked");
            (e.name.clone(), t)
        })
        .collect()
}

/// Restores a network and its optimizer state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, AdamState<f32>)> {
    let (json_path, bin_path) = checkpoint_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let mut net = Network::build(&manifest.network)?;
    let adam = load_into(&mut net, &manifest, &bin_path)?;
    Ok((net, adam))
}

/// Loads a checkpoint's parameters into an existing network, failing when
/// its tensors do not match the network's.
pub fn load_checkpoint_into(net: &mut Network, path: impl AsRef<Path>) -> Result<AdamState<f32>> {
    let (json_path, bin_path) = checkpoint_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    load_into(net, &manifest, &bin_path)
}

fn load_into(net: &mut Network, manifest: &Manifest, bin_path: &Path) -> Result<AdamState<f32>> {
    let blob = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let count = |es: &[TensorEntry]| es.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>();
    let expected =
        4 * (count(&manifest.tensors) + count(&manifest.adam.m) + count(&manifest.adam.v));
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest implies {expected}",
            bin_path.display(),
            blob.len()
        )));
    }
    let same_shapes = |es: &[TensorEntry]| {
        es.len() == manifest.tensors.len()
            && es.iter().zip(&manifest.tensors).all(|(a, b)| a.shape == b.shape)
    };
    if !same_shapes(&manifest.adam.m) || !same_shapes(&manifest.adam.v) {
        return Err(Error::Format("optimizer moments do not mirror the parameters".into()));
    }
    let mut offset = 0;
    let params = read_tensors(&manifest.tensors, &blob, &mut offset);
    let m = read_tensors(&manifest.adam.m, &blob, &mut offset);
    let v = read_tensors(&manifest.adam.v, &blob, &mut offset);
    net.load_params(params)?;
    Ok(AdamState {
        t: manifest.adam.t,
        lr: manifest.adam.lr,
        beta1: manifest.adam.beta1,
        beta2: manifest.adam.beta2,
        eps: manifest.adam.eps,
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f32) -> (ParamStore<f32>, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = scalar_store(1.5);
        let mut st = AdamState::new(&s, 0.1);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get(id).value.data()[0], 1.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.01);
        s.get_mut(id).grad.data_mut()[0] = 4.0;
        adam_step(&mut s, &mut st).unwrap();
        assert!((s.get(id).value.data()[0] + 0.01).abs() < 1e-6);
        assert_eq!(s.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.01);
        s.get_mut(id).grad.data_mut()[0] = f32::NAN;
        let err = adam_step(&mut s, &mut st).unwrap_err().to_string();
        assert!(err.contains('x'));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(select_lambda(&[(0.5, 0.7), (1.5, 0.8), (3.0, 0.75)]).unwrap(), 1.5);
        assert_eq!(select_lambda(&[(2.0, 0.8), (1.0, 0.8)]).unwrap(), 1.0);
        assert_eq!(select_lambda(&[(4.0, 0.1)]).unwrap(), 4.0);
        assert!(select_lambda(&[]).is_err());
    }

    #[test]
    fn config_reports_missing_field() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"N":2,"variant":"w_f3d"}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lambda"), "{err}");
    }
}
