//! Likelihood heads that turn network outputs `ω` into `ln p(y | ω)`.
//!
//! * [`Head::Flow`]: `K` radial stages plus a shift, `3K + 1` outputs.
//! * [`Head::Mdn`]: `C` Gaussian components with a global offset `s`,
//!   `3C + 1` outputs laid out as `[μ_c, σ̂_c, λ̂_c] × C` then `s`.
//! * [`Head::LatentVariable`]: the network sees `[x, z]` with `z ~ N(0, I)`;
//!   the density is a `K`-sample mixture of `N(y | net([x, z_j]), σ_out²)`.
//! * [`Head::Gaussian`]: homoscedastic `N(y | net(x), σ²)` baseline.
//!
//! Per-datum gradients are taken on a [`Tape`].

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::{BayesianMlp, OutputGroup};
use crate::error::{Error, Result};
use crate::flow::{self, FlowStack};
use crate::numeric::{self, log_sum_exp, normal_log_pdf, HALF_LN_2PI};
use crate::tape::{softplus, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Flow { k: usize },
    Mdn { c: usize },
    LatentVariable { noise_dim: usize, samples: usize },
    Gaussian,
}

/// `ln(e - 1)`: the unconstrained value with `softplus = 1`.
pub const UNIT_SOFTPLUS: f64 = 0.541_324_854_612_918_1;

/// Per-datum head output: value and gradients.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub log_density: f64,
    /// `rows_per_datum × output_dim`.
    pub d_outputs: Array2<f64>,
    pub d_globals: Vec<f64>,
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Flow { .. } => "nf",
            Head::Mdn { .. } => "mdn",
            Head::LatentVariable { .. } => "lv",
            Head::Gaussian => "gauss",
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Head::Flow { k } => 3 * k + 1,
            Head::Mdn { c } => 3 * c + 1,
            Head::LatentVariable { .. } | Head::Gaussian => 1,
        }
    }

    pub fn output_groups(&self) -> Vec<OutputGroup> {
        match *self {
            Head::Flow { k } => OutputGroup::flow_layout(k),
            _ => vec![OutputGroup::Generic; self.output_dim()],
        }
    }

    /// Extra network inputs appended to the features.
    pub fn extra_inputs(&self) -> usize {
        match *self {
            Head::LatentVariable { noise_dim, .. } => noise_dim,
            _ => 0,
        }
    }

    /// Network rows evaluated per datum (the LV inner samples).
    pub fn rows_per_datum(&self) -> usize {
        match *self {
            Head::LatentVariable { samples, .. } => samples,
            _ => 1,
        }
    }

    /// Point-estimated head parameters outside the network (`σ̂_out`).
    pub fn num_globals(&self) -> usize {
        match self {
            Head::LatentVariable { .. } | Head::Gaussian => 1,
            _ => 0,
        }
    }

    pub fn initial_globals(&self) -> Vec<f64> {
        vec![UNIT_SOFTPLUS; self.num_globals()]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Head::Mdn { c: 0 } => Err(Error::Config("MDN needs at least one component".into())),
            Head::LatentVariable { samples: 0, .. } => {
                Err(Error::Config("LV head needs at least one noise sample".into()))
            }
            Head::LatentVariable { noise_dim: 0, .. } => {
                Err(Error::Config("LV head needs noise_dim >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// `P(Y <= y | ω)`. The flow CDF is `Φ(z0(y))` since `z0` is increasing.
    pub fn cdf(&self, outputs: ArrayView2<'_, f64>, y: f64, globals: &[f64]) -> Result<f64> {
        Ok(match *self {
            Head::Flow { k } => {
                let row = outputs.row(0);
                let (z0, _) = FlowStack::unpack(row.as_slice().expect("contiguous"), k)?.to_base(y);
                numeric::std_normal_cdf(z0)
            }
            Head::Mdn { c } => {
                let row = outputs.row(0);
                let p = MdnParams::unpack(row.as_slice().expect("contiguous"), c)?;
                let w = p.weights();
                let sd = p.sigmas();
                (0..c)
                    .map(|i| w[i] * numeric::std_normal_cdf((y - p.mu[i] - p.shift) / sd[i]))
                    .sum()
            }
            Head::Gaussian => numeric::std_normal_cdf((y - outputs[[0, 0]]) / softplus(globals[0])),
            Head::LatentVariable { .. } => {
                let sd = softplus(globals[0]);
                let col = outputs.column(0);
                col.iter().map(|&m| numeric::std_normal_cdf((y - m) / sd)).sum::<f64>() / col.len() as f64
            }
        })
    }

    /// One draw of `y ~ p(y | ω)`.
    pub fn sample<R: Rng + ?Sized>(&self, outputs: ArrayView2<'_, f64>, globals: &[f64], rng: &mut R) -> Result<f64> {
        let e: f64 = rng.sample(StandardNormal);
        Ok(match *self {
            Head::Flow { k } => {
                let row = outputs.row(0);
                FlowStack::unpack(row.as_slice().expect("contiguous"), k)?.from_base(e, flow::DEFAULT_INVERT_TOL)?
            }
            Head::Mdn { c } => {
                let row = outputs.row(0);
                let p = MdnParams::unpack(row.as_slice().expect("contiguous"), c)?;
                let u: f64 = rng.random();
                let w = p.weights();
                let mut acc = 0.0;
                let mut pick = c - 1;
                for (i, wi) in w.iter().enumerate() {
                    acc += wi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                p.mu[pick] + p.shift + softplus(p.sigma_hat[pick]) * e
            }
            Head::Gaussian => outputs[[0, 0]] + softplus(globals[0]) * e,
            Head::LatentVariable { .. } => {
                let j = rng.random_range(0..outputs.nrows());
                outputs[[j, 0]] + softplus(globals[0]) * e
            }
        })
    }

    /// Plain `ln p(y | ω)` for one datum; `outputs` has `rows_per_datum` rows.
    pub fn log_density(&self, outputs: ArrayView2<'_, f64>, y: f64, globals: &[f64]) -> Result<f64> {
        let v = match *self {
            Head::Flow { k } => {
                let row = outputs.row(0);
                FlowStack::unpack(row.as_slice().expect("contiguous"), k)?.log_density(y)?
            }
            Head::Mdn { c } => {
                let row = outputs.row(0);
                MdnParams::unpack(row.as_slice().expect("contiguous"), c)?.log_density(y)
            }
            Head::Gaussian => normal_log_pdf(y, outputs[[0, 0]], softplus(globals[0])),
            Head::LatentVariable { .. } => {
                let sd = softplus(globals[0]);
                let logs: Vec<f64> = outputs
                    .column(0)
                    .iter()
                    .map(|&m| normal_log_pdf(y, m, sd))
                    .collect();
                numeric::log_mean_exp(&logs)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric(format!("{} log density is {}", self.name(), v)))
        }
    }

    /// Taped log density with gradients for one datum.
    pub fn log_density_grad(
        &self,
        tape: &mut Tape,
        outputs: ArrayView2<'_, f64>,
        y: f64,
        globals: &[f64],
    ) -> Result<HeadGrad> {
        tape.clear();
        let omega: Vec<NodeId> = outputs.iter().map(|&v| tape.leaf(v)).collect();
        let glob: Vec<NodeId> = globals.iter().map(|&v| tape.leaf(v)).collect();
        let yn = tape.leaf(y);
        let out = self.taped(tape, &omega, outputs.ncols(), yn, &glob);
        let value = tape.value(out);
        if !value.is_finite() {
            return Err(Error::numeric(format!("{} log density is {}", self.name(), value)));
        }
        let g = tape.backward(out)?;
        let d_outputs = Array2::from_shape_vec(outputs.raw_dim(), omega.iter().map(|&n| g.wrt(n)).collect())
            .expect("shape");
        Ok(HeadGrad {
            log_density: value,
            d_outputs,
            d_globals: glob.iter().map(|&n| g.wrt(n)).collect(),
        })
    }

    /// Builds `ln p(y | ω)` on the tape. `omega` is row-major with `cols` columns.
    pub fn taped(&self, tape: &mut Tape, omega: &[NodeId], cols: usize, y: NodeId, globals: &[NodeId]) -> NodeId {
        match *self {
            Head::Flow { .. } => flow::taped_log_density(tape, omega, y),
            Head::Mdn { c } => taped_mdn(tape, omega, c, y),
            Head::Gaussian => {
                let sd = tape.softplus(globals[0]);
                taped_normal(tape, y, omega[0], sd)
            }
            Head::LatentVariable { samples, .. } => {
                let sd = tape.softplus(globals[0]);
                let logs: Vec<NodeId> = (0..samples)
                    .map(|j| taped_normal(tape, y, omega[j * cols], sd))
                    .collect();
                let lse = tape.log_sum_exp(&logs);
                tape.add_const(lse, -(samples as f64).ln())
            }
        }
    }
}

fn taped_normal(tape: &mut Tape, y: NodeId, mean: NodeId, sd: NodeId) -> NodeId {
    let r = tape.sub(y, mean);
    let z = tape.div(r, sd);
    let sq = tape.square(z);
    let half = tape.mul_const(sq, -0.5);
    let lsd = tape.log(sd);
    let t = tape.sub(half, lsd);
    tape.add_const(t, -HALF_LN_2PI)
}

fn taped_mdn(tape: &mut Tape, omega: &[NodeId], c: usize, y: NodeId) -> NodeId {
    let s = omega[3 * c];
    let logits: Vec<NodeId> = (0..c).map(|i| omega[3 * i + 2]).collect();
    let norm = tape.log_sum_exp(&logits);
    let comps: Vec<NodeId> = (0..c)
        .map(|i| {
            let mu = tape.add(omega[3 * i], s);
            let sd = tape.softplus(omega[3 * i + 1]);
            let lp = taped_normal(tape, y, mu, sd);
            let lw = tape.sub(logits[i], norm);
            tape.add(lw, lp)
        })
        .collect();
    tape.log_sum_exp(&comps)
}

/// Mixture density parameters in unconstrained form.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnParams {
    pub mu: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub logit: Vec<f64>,
    pub shift: f64,
}

impl MdnParams {
    pub fn unpack(flat: &[f64], c: usize) -> Result<Self> {
        if flat.len() != 3 * c + 1 {
            return Err(Error::Structural(format!(
                "MDN with C={} needs {} parameters, got {}",
                c,
                3 * c + 1,
                flat.len()
            )));
        }
        let pick = |o: usize| (0..c).map(|i| flat[3 * i + o]).collect::<Vec<_>>();
        Ok(MdnParams {
            mu: pick(0),
            sigma_hat: pick(1),
            logit: pick(2),
            shift: flat[3 * c],
        })
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.mu.len() + 1);
        for i in 0..self.mu.len() {
            v.extend_from_slice(&[self.mu[i], self.sigma_hat[i], self.logit[i]]);
        }
        v.push(self.shift);
        v
    }

    /// Softmax of the logits.
    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logit);
        self.logit.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_hat.iter().map(|&s| softplus(s)).collect()
    }

    /// `ln Σ_c λ_c N(y | μ_c + s, σ_c²)`.
    pub fn log_density(&self, y: f64) -> f64 {
        let lse = log_sum_exp(&self.logit);
        let terms: Vec<f64> = (0..self.mu.len())
            .map(|i| {
                self.logit[i] - lse + normal_log_pdf(y, self.mu[i] + self.shift, softplus(self.sigma_hat[i]))
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// LV estimator `ln((1/K) Σ_j N(y | net([x, z_j]), σ_out²))` with fresh
/// `z_j ~ N(0, I)` and posterior-mean network weights.
pub fn lv_log_density<R: Rng + ?Sized>(
    y: f64,
    x: &[f64],
    net: &BayesianMlp,
    noise_dim: usize,
    samples: usize,
    sigma_out_hat: f64,
    rng: &mut R,
) -> Result<f64> {
    let d = x.len() + noise_dim;
    let inputs = Array2::from_shape_fn((samples, d), |(_, j)| if j < x.len() { x[j] } else { 0.0 });
    let mut inputs = inputs;
    for mut row in inputs.rows_mut() {
        for j in x.len()..d {
            row[j] = rng.sample(StandardNormal);
        }
    }
    let means = net.forward_mean(inputs.view())?;
    Head::LatentVariable { noise_dim, samples }.log_density(means.view(), y, &[sigma_out_hat])
}
