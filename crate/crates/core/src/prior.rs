//! Conditional densities drawn from the prior over network weights.
//!
//! The standard-normal vector `ε` depends only on the seed and the
//! architecture, so panels drawn under different [`PriorConfig`]s with the
//! same seed interpolate smoothly.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bnn::{BayesianMlp, MlpArchitecture, OutputGroup, PriorConfig};
use crate::error::Result;
use crate::flow::FlowStack;

#[derive(Debug, Clone)]
pub struct PriorPanel {
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    /// `density[[i, j]] = p(y_grid[i] | x_grid[j])`.
    pub density: Array2<f64>,
    /// Flow parameters per x, one row per grid point.
    pub params: Array2<f64>,
}

pub fn prior_epsilon(num_params: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_params).map(|_| rng.sample(StandardNormal)).collect()
}

/// A deterministic 1D-input network with parameters drawn from `prior`.
pub fn prior_network(k: usize, hidden: &[usize], prior: &PriorConfig, seed: u64) -> Result<BayesianMlp> {
    prior.validate_for_sampling()?;
    let arch = MlpArchitecture::new(1, hidden.to_vec(), FlowStack::param_count(k));
    let probe = BayesianMlp::new(arch.clone(), OutputGroup::flow_layout(k), prior.clone(), crate::bnn::VarianceMode::Fixed { sigma: 0.0 })?;
    let eps = prior_epsilon(probe.num_params(), seed);
    BayesianMlp::from_prior_draw(arch, OutputGroup::flow_layout(k), prior.clone(), &eps)
}

pub fn sample_prior_cde(
    k: usize,
    hidden: &[usize],
    prior: &PriorConfig,
    seed: u64,
    x_grid: &[f64],
    y_grid: &[f64],
) -> Result<PriorPanel> {
    let net = prior_network(k, hidden, prior, seed)?;
    let xs = Array2::from_shape_vec((x_grid.len(), 1), x_grid.to_vec()).expect("shape");
    let params = net.forward_mean(xs.view())?;
    let mut density = Array2::zeros((y_grid.len(), x_grid.len()));
    for (j, row) in params.rows().into_iter().enumerate() {
        let flow = FlowStack::unpack(row.as_slice().expect("contiguous"), k)?;
        for (i, &y) in y_grid.iter().enumerate() {
            density[[i, j]] = flow.log_density(y)?.exp();
        }
    }
    Ok(PriorPanel {
        x_grid: x_grid.to_vec(),
        y_grid: y_grid.to_vec(),
        density,
        params,
    })
}

/// Across-x standard deviation (population) of every output column.
pub fn output_spread(params: &Array2<f64>) -> Vec<f64> {
    params
        .columns()
        .into_iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.sum() / n;
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}
