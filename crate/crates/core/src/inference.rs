//! Stochastic variational inference: minibatch free energy, Adam and the
//! Monte Carlo posterior predictive.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{BayesianMlp, MlpArchitecture, Noise, PriorConfig, VarianceMode};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadGrad};
use crate::numeric::log_mean_exp;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub mc_samples_train: usize,
    pub mc_samples_test: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            iterations: 5000,
            batch_size: None,
            mc_samples_train: 20,
            mc_samples_test: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0) {
            bad.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{} must lie in [0, 1), got {}", name, b));
            }
        }
        if self.mc_samples_train == 0 || self.mc_samples_test == 0 {
            bad.push("mc samples must be >= 1".to_string());
        }
        if self.batch_size == Some(0) {
            bad.push("batch_size must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub iteration: usize,
    pub expected_nll: f64,
    pub kl: f64,
    pub free_energy: f64,
}

/// A Bayesian MLP feeding a likelihood head, plus the head's point-estimated
/// globals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub net: BayesianMlp,
    pub head: Head,
    pub globals: Vec<f64>,
}

impl ConditionalModel {
    /// `feature_dim` excludes the LV noise inputs, which are appended.
    pub fn new(
        feature_dim: usize,
        hidden: Vec<usize>,
        head: Head,
        prior: PriorConfig,
        mode: VarianceMode,
    ) -> Result<Self> {
        head.validate()?;
        prior.validate()?;
        let arch = MlpArchitecture::new(feature_dim + head.extra_inputs(), hidden, head.output_dim());
        let net = BayesianMlp::new(arch, head.output_groups(), prior, mode)?;
        Ok(ConditionalModel {
            net,
            head,
            globals: head.initial_globals(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.arch.input_dim - self.head.extra_inputs()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.globals.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.net.params().to_vec();
        v.extend_from_slice(&self.globals);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let n = self.net.num_params();
        assert_eq!(flat.len(), self.num_params());
        self.net.params_mut().copy_from_slice(&flat[..n]);
        self.globals.copy_from_slice(&flat[n..]);
    }

    fn check_features(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.feature_dim() {
            return Err(Error::Structural(format!(
                "features have {} columns, model expects {}",
                x.ncols(),
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Every random number consumed by one free-energy evaluation.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub net: Noise,
    /// LV inputs, one row per network row (zero columns for other heads).
    pub latent: Array2<f64>,
    pub mc_samples: usize,
}

/// Network rows are ordered (mc sample, datum, inner LV sample).
fn network_rows(model: &ConditionalModel, batch: usize, mc: usize) -> usize {
    mc * batch * model.head.rows_per_datum()
}

pub fn draw_batch_noise<R: Rng + ?Sized>(
    model: &ConditionalModel,
    batch: usize,
    mc: usize,
    rng: &mut R,
) -> BatchNoise {
    let rows = network_rows(model, batch, mc);
    let net = model.net.draw_noise(rows, rng);
    let latent = Array2::from_shape_simple_fn((rows, model.head.extra_inputs()), || rng.sample(StandardNormal));
    BatchNoise { net, latent, mc_samples: mc }
}

fn expand_inputs(model: &ConditionalModel, x: ArrayView2<'_, f64>, latent: &Array2<f64>, mc: usize) -> Array2<f64> {
    let r = model.head.rows_per_datum();
    let d = x.ncols();
    let extra = model.head.extra_inputs();
    let rows = mc * x.nrows() * r;
    let mut out = Array2::zeros((rows, d + extra));
    for (row_idx, mut row) in out.rows_mut().into_iter().enumerate() {
        let i = (row_idx / r) % x.nrows();
        row.slice_mut(s![..d]).assign(&x.row(i));
        if extra > 0 {
            row.slice_mut(s![d..]).assign(&latent.row(row_idx));
        }
    }
    out
}

/// Free energy and its gradient (network parameters then head globals)
/// with all randomness supplied by `noise`.
pub fn free_energy_with_noise(
    model: &ConditionalModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    n_total: usize,
    noise: &BatchNoise,
) -> Result<(FreeEnergyReport, Vec<f64>)> {
    model.check_features(x)?;
    let b = x.nrows();
    if b == 0 {
        return Err(Error::Data("free energy needs a non-empty batch".into()));
    }
    if y.len() != b {
        return Err(Error::Structural(format!("{} feature rows but {} targets", b, y.len())));
    }
    if n_total < b {
        return Err(Error::Config(format!("N_total {} is smaller than the batch {}", n_total, b)));
    }
    let mc = noise.mc_samples;
    let r = model.head.rows_per_datum();
    let inputs = expand_inputs(model, x, &noise.latent, mc);
    let pass = model.net.forward(inputs.view(), &noise.net)?;
    let out = &pass.output;

    let units: Vec<HeadGrad> = (0..mc * b)
        .into_par_iter()
        .map_init(Tape::new, |tape, u| {
            let rows = out.slice(s![u * r..(u + 1) * r, ..]);
            model
                .head
                .log_density_grad(tape, rows, y[u % b], &model.globals)
                .map_err(|e| Error::numeric(format!("datum {}: {}", u % b, e)))
        })
        .collect::<Result<_>>()?;

    let scale = n_total as f64 / b as f64 / mc as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut grad = vec![0.0; model.num_params()];
    let n_net = model.net.num_params();
    let mut nll = 0.0;
    for (u, hg) in units.iter().enumerate() {
        nll -= scale * hg.log_density;
        d_out
            .slice_mut(s![u * r..(u + 1) * r, ..])
            .zip_mut_with(&hg.d_outputs, |d, &g| *d = -scale * g);
        for (k, g) in hg.d_globals.iter().enumerate() {
            grad[n_net + k] -= scale * g;
        }
    }
    model.net.backward(&pass, &noise.net, d_out.view(), &mut grad[..n_net]);
    let kl = model.net.kl_to_prior();
    model.net.kl_gradient(1.0, &mut grad[..n_net]);
    Ok((
        FreeEnergyReport {
            iteration: 0,
            expected_nll: nll,
            kl,
            free_energy: nll + kl,
        },
        grad,
    ))
}

/// Minibatch free-energy estimate: `(N/B) · mean_mc Σ_batch −ln p(y|x, ω) + KL(q || p)`.
pub fn free_energy<R: Rng + ?Sized>(
    model: &ConditionalModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    n_total: usize,
    mc: usize,
    rng: &mut R,
) -> Result<(FreeEnergyReport, Vec<f64>)> {
    let noise = draw_batch_noise(model, x.nrows(), mc, rng);
    free_energy_with_noise(model, x, y, n_total, &noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

fn gather(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, idx: &[usize]) -> (Array2<f64>, Vec<f64>) {
    let xb = x.select(ndarray::Axis(0), idx);
    let yb = idx.iter().map(|&i| y[i]).collect();
    (xb, yb)
}

/// Runs `cfg.iterations` Adam steps on the free energy, returning the
/// per-iteration trace. Minibatches walk a fresh permutation each epoch.
pub fn train(
    model: &mut ConditionalModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    cfg: &TrainConfig,
) -> Result<Vec<FreeEnergyReport>> {
    train_with(model, x, y, cfg, |_| {})
}

/// [`train`] with a callback invoked after each iteration.
pub fn train_with<F: FnMut(&FreeEnergyReport)>(
    model: &mut ConditionalModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<FreeEnergyReport>> {
    cfg.validate()?;
    model.check_features(x)?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Data(format!("training set has {} rows and {} targets", n, y.len())));
    }
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut state = AdamState::new(model.num_params());
    let mut params = model.flat_params();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let result = if batch == n {
            free_energy(model, x, y, n, cfg.mc_samples_train, &mut rng)
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (xb, yb) = gather(x, y, &order[cursor..cursor + batch]);
            cursor += batch;
            free_energy(model, xb.view(), ArrayView1::from(&yb), n, cfg.mc_samples_train, &mut rng)
        };
        let (mut report, grad) = result.map_err(|e| match e {
            Error::Numeric { context } => Error::numeric(format!("iteration {}: {}", it, context)),
            other => other,
        })?;
        report.iteration = it;
        adam_step(&mut state, &mut params, &grad, cfg);
        model.set_flat_params(&params);
        on_step(&report);
        trace.push(report);
    }
    Ok(trace)
}

/// `ln((1/M) Σ_m p(y | h_{θ_m}(x)))` for every row, θ_m drawn by local
/// reparameterisation.
pub fn predictive_log_density<R: Rng + ?Sized>(
    model: &ConditionalModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    mc: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model.check_features(x)?;
    if y.len() != x.nrows() {
        return Err(Error::Structural(format!("{} feature rows but {} targets", x.nrows(), y.len())));
    }
    if mc == 0 {
        return Err(Error::Config("mc_samples must be >= 1".into()));
    }
    let r = model.head.rows_per_datum();
    let chunk = (100_000 / (mc * r)).max(1);
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let xc = x.slice(s![start..end, ..]);
        let b = end - start;
        let noise = draw_batch_noise(model, b, mc, rng);
        let inputs = expand_inputs(model, xc, &noise.latent, mc);
        let pass = model.net.forward(inputs.view(), &noise.net)?;
        let logs: Vec<f64> = (0..mc * b)
            .into_par_iter()
            .map(|u| {
                let rows = pass.output.slice(s![u * r..(u + 1) * r, ..]);
                model.head.log_density(rows, y[start + u % b], &model.globals)
            })
            .collect::<Result<_>>()?;
        for i in 0..b {
            let per: Vec<f64> = (0..mc).map(|m| logs[m * b + i]).collect();
            out.push(log_mean_exp(&per));
        }
        start = end;
    }
    Ok(out)
}

/// Head parameters for `mc` posterior draws per row of `x`: entry `[i][m]`
/// holds the `rows_per_datum × output_dim` block for datum `i`, draw `m`.
pub fn draw_head_params<R: Rng + ?Sized>(
    model: &ConditionalModel,
    x: ArrayView2<'_, f64>,
    mc: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Array2<f64>>>> {
    model.check_features(x)?;
    let b = x.nrows();
    let r = model.head.rows_per_datum();
    let noise = draw_batch_noise(model, b, mc, rng);
    let inputs = expand_inputs(model, x, &noise.latent, mc);
    let out = model.net.forward(inputs.view(), &noise.net)?.output;
    Ok((0..b)
        .map(|i| {
            (0..mc)
                .map(|m| {
                    let u = m * b + i;
                    out.slice(s![u * r..(u + 1) * r, ..]).to_owned()
                })
                .collect()
        })
        .collect())
}
