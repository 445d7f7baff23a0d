//! Inverted radial normalising flows.
//!
//! A [`FlowStack`] maps a target `y` to a base variable `z0 ~ N(0, 1)`:
//! first the global shift (`u = y - s`), then `f_K`, ..., `f_1`. Each stage is
//!
//! ```text
//! f(z) = z + α β (z - γ) / (α + |z - γ|),   α = softplus(α̂),  β = exp(β̂) - 1
//! ```
//!
//! which is strictly increasing for any finite `(α̂, β̂, γ)`. Density
//! evaluation is closed form; sampling inverts each stage by bisection.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{self, std_normal_log_pdf};
use crate::tape::{softplus, NodeId, Tape};

/// Default residual tolerance for [`RadialStage::invert`].
pub const DEFAULT_INVERT_TOL: f64 = 1e-10;

/// Maps unconstrained `(α̂, β̂)` to `(α > 0, β > -1)`.
pub fn constrain(alpha_hat: f64, beta_hat: f64) -> Result<(f64, f64)> {
    ensure_finite(alpha_hat, || "alpha_hat".into())?;
    ensure_finite(beta_hat, || "beta_hat".into())?;
    Ok((softplus(alpha_hat), beta_hat.exp_m1()))
}

/// One radial warping stage in unconstrained form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialStage {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub gamma: f64,
}

impl RadialStage {
    pub fn new(alpha_hat: f64, beta_hat: f64, gamma: f64) -> Self {
        RadialStage {
            alpha_hat,
            beta_hat,
            gamma,
        }
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_hat)
    }

    pub fn beta(&self) -> f64 {
        self.beta_hat.exp_m1()
    }

    pub fn forward(&self, z: f64) -> f64 {
        let a = self.alpha();
        let r = z - self.gamma;
        z + a * self.beta() * r / (a + r.abs())
    }

    /// `ln f'(z) = ln(1 + α²β / (α + |z - γ|)²)`.
    ///
    /// Rewritten as `β̂ + ln(1 + (1 - q)(e^{-β̂} - 1))` with `q = α²/(α + |z - γ|)²`,
    /// so it is exactly `β̂` at `z = γ` and exactly 0 when `β̂ = 0`.
    pub fn log_grad(&self, z: f64) -> f64 {
        let a = self.alpha();
        let ar = (z - self.gamma).abs();
        let den = a + ar;
        let q = (a / den) * (a / den);
        let one_minus_q = ar * (2.0 * a + ar) / (den * den);
        let b = self.beta_hat;
        if b >= -30.0 {
            b + (one_minus_q * (-b).exp_m1()).ln_1p()
        } else {
            (one_minus_q + q * b.exp()).ln()
        }
    }

    /// Solves `f(z) = t` by bisection to residual `tol`.
    pub fn invert(&self, t: f64, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(Error::Solver(format!("tolerance must be positive, got {}", tol)));
        }
        ensure_finite(t, || "inversion target".into())?;
        let a = self.alpha();
        let reach = 2.0 * (t - self.gamma).abs() + a * (1.0 + self.beta().abs()) + 1.0;
        let (mut lo, mut hi) = (self.gamma - reach, self.gamma + reach);
        let mut doublings = 0;
        while !(self.forward(lo) <= t && t <= self.forward(hi)) {
            if doublings == 60 {
                return Err(Error::Solver(format!(
                    "could not bracket {} for stage {:?}",
                    t, self
                )));
            }
            let w = hi - lo;
            lo -= w;
            hi += w;
            doublings += 1;
        }
        numeric::bisect_increasing(|z| self.forward(z), t, lo, hi, tol)
    }
}

/// `K` radial stages `f_1 … f_K` plus a global shift `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    /// `stages[0]` is `f_1`, the stage nearest the base distribution.
    pub stages: Vec<RadialStage>,
    pub shift: f64,
}

impl FlowStack {
    pub fn new(stages: Vec<RadialStage>, shift: f64) -> Self {
        FlowStack { stages, shift }
    }

    /// Number of flat parameters for `k` stages.
    pub fn param_count(k: usize) -> usize {
        3 * k + 1
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Reads `[α̂_1, β̂_1, γ_1, …, α̂_K, β̂_K, γ_K, s]`.
    pub fn unpack(flat: &[f64], k: usize) -> Result<Self> {
        if flat.len() != Self::param_count(k) {
            return Err(Error::Structural(format!(
                "flow with K={} needs {} parameters, got {}",
                k,
                Self::param_count(k),
                flat.len()
            )));
        }
        let stages = flat[..3 * k]
            .chunks_exact(3)
            .map(|c| RadialStage::new(c[0], c[1], c[2]))
            .collect();
        Ok(FlowStack::new(stages, flat[3 * k]))
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::param_count(self.stages.len()));
        for s in &self.stages {
            v.extend_from_slice(&[s.alpha_hat, s.beta_hat, s.gamma]);
        }
        v.push(self.shift);
        v
    }

    /// Pushes `y` through the shift and every stage. Returns `(z0, Σ ln f_k')`.
    pub fn to_base(&self, y: f64) -> (f64, f64) {
        let mut u = y - self.shift;
        let mut log_det = 0.0;
        for stage in self.stages.iter().rev() {
            log_det += stage.log_grad(u);
            u = stage.forward(u);
        }
        (u, log_det)
    }

    /// `ln p(y) = ln N(z0 | 0, 1) + Σ_k ln f_k'(input of f_k)`.
    pub fn log_density(&self, y: f64) -> Result<f64> {
        ensure_finite(y, || "target".into())?;
        let (z0, log_det) = self.to_base(y);
        ensure_finite(std_normal_log_pdf(z0) + log_det, || {
            format!("log density at y={}", y)
        })
    }

    /// Maps a base draw back to target space.
    pub fn from_base(&self, z0: f64, tol: f64) -> Result<f64> {
        let mut z = z0;
        for stage in &self.stages {
            z = stage.invert(z, tol)?;
        }
        Ok(z + self.shift)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, tol: f64) -> Result<f64> {
        let z0: f64 = rng.sample(StandardNormal);
        self.from_base(z0, tol)
    }

    /// Trapezoid mass of `exp(log_density)` on `[lo, hi]` with `n` points.
    pub fn quadrature_mass(&self, lo: f64, hi: f64, n: usize) -> f64 {
        let grid = numeric::linspace(lo, hi, n);
        let dens: Vec<f64> = grid
            .iter()
            .map(|&y| {
                let (z0, ld) = self.to_base(y);
                (std_normal_log_pdf(z0) + ld).exp()
            })
            .collect();
        numeric::trapezoid(&dens, grid[1] - grid[0])
    }

    /// One-line text form: `K s α̂_1 β̂_1 γ_1 …` with 17 significant digits.
    pub fn to_line(&self) -> String {
        let mut out = format!("{} {:.16e}", self.stages.len(), self.shift);
        for s in &self.stages {
            out.push_str(&format!(
                " {:.16e} {:.16e} {:.16e}",
                s.alpha_hat, s.beta_hat, s.gamma
            ));
        }
        out
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut tokens = line.split_whitespace();
        let k: usize = tokens
            .next()
            .ok_or_else(|| Error::Structural("empty flow record".into()))?
            .parse()
            .map_err(|e| Error::Structural(format!("bad stage count: {}", e)))?;
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Structural(format!("bad real {:?}: {}", t, e)))
            })
            .collect::<Result<_>>()?;
        if values.len() != 3 * k + 1 {
            return Err(Error::Structural(format!(
                "flow record with K={} has {} reals, expected {}",
                k,
                values.len(),
                3 * k + 1
            )));
        }
        let stages = values[1..]
            .chunks_exact(3)
            .map(|c| RadialStage::new(c[0], c[1], c[2]))
            .collect();
        Ok(FlowStack::new(stages, values[0]))
    }
}

/// Taped stage transform and log-gradient. Returns `(f(z), ln f'(z))`.
pub fn taped_stage(
    tape: &mut Tape,
    z: NodeId,
    alpha_hat: NodeId,
    beta_hat: NodeId,
    gamma: NodeId,
) -> (NodeId, NodeId) {
    let a = tape.softplus(alpha_hat);
    let eb = tape.exp(beta_hat);
    let beta = tape.add_const(eb, -1.0);
    let r = tape.sub(z, gamma);
    let ar = tape.abs(r);
    let den = tape.add(a, ar);

    let ab = tape.mul(a, beta);
    let abr = tape.mul(ab, r);
    let shift = tape.div(abr, den);
    let out = tape.add(z, shift);

    // same two-branch form as RadialStage::log_grad
    let ratio = tape.div(a, den);
    let q = tape.square(ratio);
    let two_a = tape.mul_const(a, 2.0);
    let t = tape.add(two_a, ar);
    let num = tape.mul(ar, t);
    let den2 = tape.square(den);
    let one_minus_q = tape.div(num, den2);
    let log_grad = if tape.value(beta_hat) >= 0.0 {
        let nb = tape.neg(beta_hat);
        let e = tape.exp(nb);
        let w = tape.mul(one_minus_q, e);
        let inner = tape.add(q, w);
        let l = tape.log(inner);
        tape.add(beta_hat, l)
    } else {
        let w = tape.mul(q, eb);
        let inner = tape.add(one_minus_q, w);
        tape.log(inner)
    };
    (out, log_grad)
}

/// Taped `ln p(y | ω)` for a flat flow parameter vector `omega` (length `3K+1`).
pub fn taped_log_density(tape: &mut Tape, omega: &[NodeId], y: NodeId) -> NodeId {
    let k = (omega.len() - 1) / 3;
    let mut u = tape.sub(y, omega[3 * k]);
    let mut log_det: Option<NodeId> = None;
    for stage in (0..k).rev() {
        let p = &omega[3 * stage..3 * stage + 3];
        let (next, lg) = taped_stage(tape, u, p[0], p[1], p[2]);
        log_det = Some(match log_det {
            None => lg,
            Some(acc) => tape.add(acc, lg),
        });
        u = next;
    }
    let sq = tape.square(u);
    let half = tape.mul_const(sq, -0.5);
    let base = tape.add_const(half, -numeric::HALF_LN_2PI);
    match log_det {
        None => base,
        Some(ld) => tape.add(base, ld),
    }
}
