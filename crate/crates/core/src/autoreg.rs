//! Two-dimensional conditional densities by the chain rule:
//! `p(y1, y2 | x) = p(y1 | x) · p(y2 | x, y1)`.
//!
//! Everything here works in normalised units; `y1` is appended to the
//! second network's input as is.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::{PriorConfig, VarianceMode};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::inference::{predictive_log_density, train, ConditionalModel, FreeEnergyReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoregModel {
    pub first: ConditionalModel,
    pub second: ConditionalModel,
    /// Target names in model order: `order[0]` is `y1`.
    pub order: [String; 2],
}

impl AutoregModel {
    pub fn new(
        feature_dim: usize,
        hidden: Vec<usize>,
        k: usize,
        prior: PriorConfig,
        mode: VarianceMode,
        order: [String; 2],
    ) -> Result<Self> {
        let head = Head::Flow { k };
        Ok(AutoregModel {
            first: ConditionalModel::new(feature_dim, hidden.clone(), head, prior.clone(), mode)?,
            second: ConditionalModel::new(feature_dim + 1, hidden, head, prior, mode)?,
            order,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.first.feature_dim()
    }

    pub fn init_posterior(&mut self, seed: u64, sigma_init: f64) -> Result<()> {
        self.first.net.init_posterior(seed, sigma_init)?;
        self.second.net.init_posterior(seed.wrapping_add(1), sigma_init)
    }

    /// Errors unless the caller's target ordering is the one trained.
    pub fn check_order(&self, order: &[String; 2]) -> Result<()> {
        if *order != self.order {
            return Err(Error::Config(format!(
                "model was trained with ordering {:?} but evaluation asked for {:?}",
                self.order, order
            )));
        }
        Ok(())
    }

    pub fn train(
        &mut self,
        x: ArrayView2<'_, f64>,
        y1: ArrayView1<'_, f64>,
        y2: ArrayView1<'_, f64>,
        cfg: &TrainConfig,
    ) -> Result<(Vec<FreeEnergyReport>, Vec<FreeEnergyReport>)> {
        let t1 = train(&mut self.first, x, y1, cfg)?;
        let x2 = with_column(x, y1);
        let cfg2 = TrainConfig {
            seed: cfg.seed.wrapping_add(1),
            ..cfg.clone()
        };
        let t2 = train(&mut self.second, x2.view(), y2, &cfg2)?;
        Ok((t1, t2))
    }
}

fn with_column(x: ArrayView2<'_, f64>, c: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), x.ncols() + 1));
    out.slice_mut(s![.., ..x.ncols()]).assign(&x);
    out.column_mut(x.ncols()).assign(&c);
    out
}

/// Sum of the two predictive log densities, per row.
pub fn joint_log_density<R: Rng + ?Sized>(
    model: &AutoregModel,
    x: ArrayView2<'_, f64>,
    y1: ArrayView1<'_, f64>,
    y2: ArrayView1<'_, f64>,
    mc: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let a = predictive_log_density(&model.first, x, y1, mc, rng)?;
    let x2 = with_column(x, y1);
    let b = predictive_log_density(&model.second, x2.view(), y2, mc, rng)?;
    Ok(a.iter().zip(&b).map(|(p, q)| p + q).collect())
}

/// How to fill one encoded feature column when evaluating a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Known(f64),
    /// Unobserved normalised numeric feature, drawn from `N(0, 1)`.
    Missing,
    /// First column of an unobserved `(sin, cos)` hour pair; the hour is
    /// drawn uniformly. The next slot must be [`Slot::HourCos`].
    HourSin,
    HourCos,
}

fn draw_features<R: Rng + ?Sized>(cond: &[Slot], rng: &mut R) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cond.len()];
    let mut j = 0;
    while j < cond.len() {
        match cond[j] {
            Slot::Known(v) => out[j] = v,
            Slot::Missing => out[j] = rng.sample(StandardNormal),
            Slot::HourSin => {
                if cond.get(j + 1) != Some(&Slot::HourCos) {
                    return Err(Error::Config(format!("hour slot {} is not followed by its cosine", j)));
                }
                let a = 2.0 * PI * rng.random::<f64>();
                out[j] = a.sin();
                out[j + 1] = a.cos();
                j += 1;
            }
            Slot::HourCos => {
                return Err(Error::Config(format!("hour cosine slot {} has no sine before it", j)));
            }
        }
        j += 1;
    }
    Ok(out)
}

/// Density over the `(y1, y2)` grid, row-major with `y2` as the row index,
/// averaged over `marginal_samples` draws of the missing features.
pub fn density_grid(
    model: &AutoregModel,
    condition: &[Slot],
    y1_grid: &[f64],
    y2_grid: &[f64],
    marginal_samples: usize,
    mc: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if y1_grid.is_empty() || y2_grid.is_empty() {
        return Err(Error::Config("density grid axes must be non-empty".into()));
    }
    if marginal_samples == 0 {
        return Err(Error::Config("marginal_samples must be >= 1".into()));
    }
    if condition.len() != model.feature_dim() {
        return Err(Error::Structural(format!(
            "condition has {} slots, model takes {} features",
            condition.len(),
            model.feature_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n1, n2) = (y1_grid.len(), y2_grid.len());
    let d = model.feature_dim();
    let mut acc = Array2::<f64>::zeros((n2, n1));
    for _ in 0..marginal_samples {
        let f = draw_features(condition, &mut rng)?;
        let x1 = Array2::from_shape_fn((n1, d), |(_, j)| f[j]);
        let lp1 = predictive_log_density(&model.first, x1.view(), ArrayView1::from(y1_grid), mc, &mut rng)?;
        let x2 = Array2::from_shape_fn((n1 * n2, d + 1), |(r, j)| if j < d { f[j] } else { y1_grid[r % n1] });
        let y2 = Array2::from_shape_fn((n2, n1), |(i, _)| y2_grid[i]);
        let lp2 = predictive_log_density(
            &model.second,
            x2.view(),
            ArrayView1::from(y2.as_slice().expect("contiguous")),
            mc,
            &mut rng,
        )?;
        for i in 0..n2 {
            for j in 0..n1 {
                acc[[i, j]] += (lp1[j] + lp2[i * n1 + j]).exp();
            }
        }
    }
    acc /= marginal_samples as f64;
    Ok(acc)
}

/// `Σ density · Δy1 · Δy2` on an evenly spaced grid.
pub fn grid_mass(grid: &Array2<f64>, d1: f64, d2: f64) -> f64 {
    grid.sum() * d1 * d2
}

/// Fraction of `points` that fall in cells whose density is in the top
/// decile. Cells are centred on the grid nodes.
pub fn top_decile_coverage(grid: &Array2<f64>, y1_grid: &[f64], y2_grid: &[f64], points: &[(f64, f64)]) -> f64 {
    let mut vals: Vec<f64> = grid.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let cut = vals[(vals.len() / 10).max(1) - 1];
    let locate = |g: &[f64], v: f64| {
        let step = g[1] - g[0];
        let k = ((v - g[0]) / step).round();
        if k < 0.0 || k >= g.len() as f64 {
            None
        } else {
            Some(k as usize)
        }
    };
    let hits = points
        .iter()
        .filter(|(a, b)| match (locate(y1_grid, *a), locate(y2_grid, *b)) {
            (Some(j), Some(i)) => grid[[i, j]] >= cut,
            _ => false,
        })
        .count();
    hits as f64 / points.len() as f64
}
