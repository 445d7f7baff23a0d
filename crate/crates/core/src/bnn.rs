//! Variational Bayesian MLP with a mean-field Gaussian posterior.
//!
//! All variational parameters live in one flat vector so the optimiser can
//! treat them uniformly. For each layer the layout is
//! `[weight means (fan_in × fan_out, row-major), bias means]`, followed by
//! `[weight log-variances, bias log-variances]` when variances are learned.
//!
//! Sampling uses the local reparameterisation trick: every pre-activation
//! `a = h·M + m_b + sqrt((h∘h)·V + v_b) ∘ ε` gets its own standard-normal
//! `ε` per batch row. The hidden→output weights are multiplied by `λ`
//! (means) and `λ²` (variances) before use; priors and posteriors are
//! defined on the unscaled weights, so the KL term does not depend on `λ`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which flow or head parameter an output unit feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputGroup {
    AlphaHat,
    BetaHat,
    Gamma,
    Shift,
    /// Baseline heads (MDN, LV, Gaussian) use the shared `sigma_w` prior.
    Generic,
}

impl OutputGroup {
    /// Group map of an NF head: `[α̂, β̂, γ] × K` then the shift.
    pub fn flow_layout(k: usize) -> Vec<OutputGroup> {
        let mut g = Vec::with_capacity(3 * k + 1);
        for _ in 0..k {
            g.extend_from_slice(&[OutputGroup::AlphaHat, OutputGroup::BetaHat, OutputGroup::Gamma]);
        }
        g.push(OutputGroup::Shift);
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub std: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, std: f64) -> Self {
        GaussianPrior { mean, std }
    }
}

/// Prior hyperparameters.
///
/// Hidden-layer weights and biases are `N(0, sigma_w²)`. Hidden→output
/// weights of a group are `N(0, σ_g²)` and its biases `N(μ_g, σ_g²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma_w: f64,
    pub lambda: f64,
    pub alpha_hat: GaussianPrior,
    pub beta_hat: GaussianPrior,
    pub gamma: GaussianPrior,
    pub shift: GaussianPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            sigma_w: 1.0,
            lambda: 1.0,
            alpha_hat: GaussianPrior::new(1.0, 1.0),
            beta_hat: GaussianPrior::new(0.0, 1.0),
            gamma: GaussianPrior::new(0.0, 1.0),
            shift: GaussianPrior::new(0.0, 1.0),
        }
    }
}

impl PriorConfig {
    /// Training needs strictly positive prior stds for a finite KL.
    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    /// Prior draws also accept zero stds (a point-mass group).
    pub fn validate_for_sampling(&self) -> Result<()> {
        self.check(true)
    }

    fn check(&self, allow_zero: bool) -> Result<()> {
        let stds = [
            ("sigma_w", self.sigma_w),
            ("sigma_alpha", self.alpha_hat.std),
            ("sigma_beta", self.beta_hat.std),
            ("sigma_gamma", self.gamma.std),
            ("sigma_shift", self.shift.std),
        ];
        for (name, s) in stds {
            let ok = if allow_zero { s >= 0.0 } else { s > 0.0 };
            if !(ok && s.is_finite()) {
                let want = if allow_zero { "non-negative" } else { "positive" };
                return Err(Error::Config(format!("{} must be {}, got {}", name, want, s)));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    fn output_prior(&self, group: OutputGroup) -> GaussianPrior {
        match group {
            OutputGroup::AlphaHat => self.alpha_hat,
            OutputGroup::BetaHat => self.beta_hat,
            OutputGroup::Gamma => self.gamma,
            OutputGroup::Shift => self.shift,
            OutputGroup::Generic => GaussianPrior::new(0.0, self.sigma_w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpArchitecture {
            input_dim,
            hidden,
            output_dim,
        }
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Every weight and bias shares the variance `sigma²`.
    Fixed { sigma: f64 },
    /// Per-parameter log-variances are optimised alongside the means.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    w_logvar: Option<usize>,
    b_logvar: Option<usize>,
}

/// Per-layer standard-normal draws for the local reparameterisation.
#[derive(Debug, Clone)]
pub struct Noise(pub Vec<Array2<f64>>);

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer; `inputs[0]` is the feature batch.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation standard deviations per layer.
    sds: Vec<Array2<f64>>,
    /// Output pre-activations, one row per input row.
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianMlp {
    pub arch: MlpArchitecture,
    pub groups: Vec<OutputGroup>,
    pub prior: PriorConfig,
    pub mode: VarianceMode,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// `KL(N(m, v) || N(mu, sigma²))`.
pub fn gaussian_kl(m: f64, v: f64, prior: GaussianPrior) -> f64 {
    let s2 = prior.std * prior.std;
    prior.std.ln() - 0.5 * v.ln() + (v + (m - prior.mean).powi(2)) / (2.0 * s2) - 0.5
}

impl BayesianMlp {
    /// Builds a network with all means zero; call [`Self::init_posterior`].
    pub fn new(
        arch: MlpArchitecture,
        groups: Vec<OutputGroup>,
        prior: PriorConfig,
        mode: VarianceMode,
    ) -> Result<Self> {
        if groups.len() != arch.output_dim {
            return Err(Error::Structural(format!(
                "output group map has {} entries for {} outputs",
                groups.len(),
                arch.output_dim
            )));
        }
        if arch.input_dim == 0 || arch.output_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::Structural(format!("degenerate architecture {:?}", arch)));
        }
        prior.validate_for_sampling()?;
        if let VarianceMode::Fixed { sigma } = mode {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("posterior sigma must be >= 0, got {}", sigma)));
            }
        }
        let learned = matches!(mode, VarianceMode::Learned);
        let mut layout = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in arch.layer_shapes() {
            let w = offset;
            let b = w + fan_in * fan_out;
            offset = b + fan_out;
            let (w_logvar, b_logvar) = if learned {
                let wl = offset;
                let bl = wl + fan_in * fan_out;
                offset = bl + fan_out;
                (Some(wl), Some(bl))
            } else {
                (None, None)
            };
            layout.push(LayerLayout {
                fan_in,
                fan_out,
                w,
                b,
                w_logvar,
                b_logvar,
            });
        }
        Ok(BayesianMlp {
            arch,
            groups,
            prior,
            mode,
            layout,
            params: vec![0.0; offset],
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    /// Xavier-uniform weight means, zero bias means, variances `sigma_init²`.
    pub fn init_posterior(&mut self, seed: u64, sigma_init: f64) -> Result<()> {
        if !(sigma_init > 0.0) {
            return Err(Error::Config(format!("sigma_init must be positive, got {}", sigma_init)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in self.layout.clone() {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for p in &mut self.params[l.w..l.w + l.fan_in * l.fan_out] {
                *p = rng.sample(dist);
            }
            self.params[l.b..l.b + l.fan_out].fill(0.0);
            let logvar = (sigma_init * sigma_init).ln();
            if let (Some(wl), Some(bl)) = (l.w_logvar, l.b_logvar) {
                self.params[wl..wl + l.fan_in * l.fan_out].fill(logvar);
                self.params[bl..bl + l.fan_out].fill(logvar);
            }
        }
        if let VarianceMode::Fixed { .. } = self.mode {
            self.mode = VarianceMode::Fixed { sigma: sigma_init };
        }
        Ok(())
    }

    fn is_output(&self, layer: usize) -> bool {
        layer + 1 == self.layout.len()
    }

    fn weight_view(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = &self.layout[layer];
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.params[l.w..l.w + l.fan_in * l.fan_out])
            .expect("layout")
    }

    fn bias_view(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = &self.layout[layer];
        ArrayView1::from(&self.params[l.b..l.b + l.fan_out])
    }

    /// Posterior variance of every parameter, in the mean layout order
    /// (weights then biases per layer).
    fn variances(&self, layer: usize) -> (Array2<f64>, Array1<f64>) {
        let l = &self.layout[layer];
        match self.mode {
            VarianceMode::Fixed { sigma } => (
                Array2::from_elem((l.fan_in, l.fan_out), sigma * sigma),
                Array1::from_elem(l.fan_out, sigma * sigma),
            ),
            VarianceMode::Learned => {
                let wl = l.w_logvar.expect("learned layout");
                let bl = l.b_logvar.expect("learned layout");
                let w = ArrayView2::from_shape(
                    (l.fan_in, l.fan_out),
                    &self.params[wl..wl + l.fan_in * l.fan_out],
                )
                .expect("layout")
                .mapv(f64::exp);
                let b = ArrayView1::from(&self.params[bl..bl + l.fan_out]).mapv(f64::exp);
                (w, b)
            }
        }
    }

    /// Sets every posterior variance to `v` (learned mode writes `ln v`).
    pub fn set_all_variances(&mut self, v: f64) {
        match self.mode {
            VarianceMode::Fixed { .. } => self.mode = VarianceMode::Fixed { sigma: v.sqrt() },
            VarianceMode::Learned => {
                for l in self.layout.clone() {
                    let (wl, bl) = (l.w_logvar.unwrap(), l.b_logvar.unwrap());
                    self.params[wl..wl + l.fan_in * l.fan_out].fill(v.ln());
                    self.params[bl..bl + l.fan_out].fill(v.ln());
                }
            }
        }
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Noise {
        Noise(
            self.layout
                .iter()
                .map(|l| Array2::from_shape_simple_fn((rows, l.fan_out), || rng.sample(StandardNormal)))
                .collect(),
        )
    }

    pub fn zero_noise(&self, rows: usize) -> Noise {
        Noise(
            self.layout
                .iter()
                .map(|l| Array2::zeros((rows, l.fan_out)))
                .collect(),
        )
    }

    fn lambda_for(&self, layer: usize) -> f64 {
        if self.is_output(layer) {
            self.prior.lambda
        } else {
            1.0
        }
    }

    /// Local-reparameterisation forward pass with caller-supplied noise.
    pub fn forward(&self, x: ArrayView2<'_, f64>, noise: &Noise) -> Result<ForwardPass> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Structural(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        let rows = x.nrows();
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut sds = Vec::with_capacity(self.layout.len());
        let mut h = x.to_owned();
        for layer in 0..self.layout.len() {
            let eps = &noise.0[layer];
            if eps.nrows() != rows {
                return Err(Error::Structural(format!(
                    "noise for layer {} has {} rows, batch has {}",
                    layer,
                    eps.nrows(),
                    rows
                )));
            }
            let lam = self.lambda_for(layer);
            let mut mean = h.dot(&self.weight_view(layer));
            if lam != 1.0 {
                mean *= lam;
            }
            mean += &self.bias_view(layer);
            let var = self.preactivation_variance(layer, &h, lam);
            let sd = var.mapv(|v| {
                assert!(v >= 0.0, "negative pre-activation variance {}", v);
                v.sqrt()
            });
            let mut a = mean;
            a.zip_mut_with(&(&sd * eps), |a, n| *a += n);
            let out = if self.is_output(layer) {
                a
            } else {
                a.mapv_into(f64::tanh)
            };
            inputs.push(h);
            sds.push(sd);
            h = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite network output"));
        }
        Ok(ForwardPass {
            inputs,
            sds,
            output: h,
        })
    }

    fn preactivation_variance(&self, layer: usize, h: &Array2<f64>, lam: f64) -> Array2<f64> {
        let fan_out = self.layout[layer].fan_out;
        match self.mode {
            VarianceMode::Fixed { sigma } => {
                let s2 = sigma * sigma;
                let row_sq = h.map_axis(Axis(1), |r| r.dot(&r));
                let mut var = Array2::zeros((h.nrows(), fan_out));
                for (mut row, &sq) in var.rows_mut().into_iter().zip(row_sq.iter()) {
                    row.fill(s2 * (lam * lam * sq + 1.0));
                }
                var
            }
            VarianceMode::Learned => {
                let (wv, bv) = self.variances(layer);
                let mut var = h.mapv(|v| v * v).dot(&wv);
                if lam != 1.0 {
                    var *= lam * lam;
                }
                var + &bv
            }
        }
    }

    /// Deterministic pass through the posterior means.
    pub fn forward_mean(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let saved = self.clone().with_zero_variance();
        Ok(saved.forward(x, &saved.zero_noise(x.nrows()))?.output)
    }

    fn with_zero_variance(mut self) -> Self {
        if let VarianceMode::Fixed { .. } = self.mode {
            self.mode = VarianceMode::Fixed { sigma: 0.0 };
        }
        self
    }

    /// Draws fresh noise and runs [`Self::forward`].
    pub fn forward_local_reparam<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardPass, Noise)> {
        let noise = self.draw_noise(x.nrows(), rng);
        let pass = self.forward(x, &noise)?;
        Ok((pass.output.clone(), pass, noise))
    }

    /// Gradient of `Σ d_out ∘ output` with respect to every variational
    /// parameter, accumulated into `grad` (same layout as [`Self::params`]).
    /// Returns the gradient with respect to the network input.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        noise: &Noise,
        d_out: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        assert_eq!(grad.len(), self.params.len());
        let mut g_a = d_out.to_owned();
        for layer in (0..self.layout.len()).rev() {
            let l = self.layout[layer];
            let h = &pass.inputs[layer];
            let sd = &pass.sds[layer];
            let eps = &noise.0[layer];
            let lam = self.lambda_for(layer);

            // mean pathway
            let dw = h.t().dot(&g_a);
            for (g, d) in grad[l.w..l.w + l.fan_in * l.fan_out].iter_mut().zip(dw.iter()) {
                *g += lam * d;
            }
            for (g, d) in grad[l.b..l.b + l.fan_out].iter_mut().zip(g_a.sum_axis(Axis(0)).iter()) {
                *g += d;
            }

            // variance pathway: d a / d var = eps / (2 sd)
            let mut g_var = &g_a * eps;
            g_var.zip_mut_with(sd, |g, &s| *g = if s > 0.0 { *g / (2.0 * s) } else { 0.0 });

            let mut g_h = g_a.dot(&self.weight_view(layer).t());
            if lam != 1.0 {
                g_h *= lam;
            }
            match self.mode {
                VarianceMode::Fixed { sigma } => {
                    // var = sigma² (λ² Σ_i h_i² + 1) for every output unit
                    let coef = 2.0 * sigma * sigma * lam * lam;
                    let row_sum = g_var.sum_axis(Axis(1));
                    for ((mut gh_row, h_row), &rs) in
                        g_h.rows_mut().into_iter().zip(h.rows()).zip(row_sum.iter())
                    {
                        gh_row.zip_mut_with(&h_row, |g, &hv| *g += coef * rs * hv);
                    }
                }
                VarianceMode::Learned => {
                    let (wv, bv) = self.variances(layer);
                    let h2 = h.mapv(|v| v * v);
                    let dv = h2.t().dot(&g_var);
                    let wl = l.w_logvar.unwrap();
                    for ((g, d), v) in grad[wl..wl + l.fan_in * l.fan_out]
                        .iter_mut()
                        .zip(dv.iter())
                        .zip(wv.iter())
                    {
                        *g += lam * lam * d * v;
                    }
                    let bl = l.b_logvar.unwrap();
                    for ((g, d), v) in grad[bl..bl + l.fan_out]
                        .iter_mut()
                        .zip(g_var.sum_axis(Axis(0)).iter())
                        .zip(bv.iter())
                    {
                        *g += d * v;
                    }
                    let mut extra = g_var.dot(&wv.t());
                    extra *= 2.0 * lam * lam;
                    extra *= h;
                    g_h += &extra;
                }
            }

            if layer > 0 {
                // h = tanh(a_prev)
                g_h.zip_mut_with(h, |g, &hv| *g *= 1.0 - hv * hv);
            }
            g_a = g_h;
        }
        g_a
    }

    fn prior_of(&self, layer: usize, out_index: usize) -> GaussianPrior {
        if self.is_output(layer) {
            self.prior.output_prior(self.groups[out_index])
        } else {
            GaussianPrior::new(0.0, self.prior.sigma_w)
        }
    }

    /// Visits `(mean index, logvar index, variance, weight prior, bias?)`.
    fn for_each_param<F: FnMut(usize, Option<usize>, f64, GaussianPrior)>(&self, mut f: F) {
        for (layer, l) in self.layout.iter().enumerate() {
            let (wv, bv) = self.variances(layer);
            for i in 0..l.fan_in {
                for j in 0..l.fan_out {
                    let k = i * l.fan_out + j;
                    let mut prior = self.prior_of(layer, j);
                    if self.is_output(layer) {
                        // weights are zero-mean; the group mean applies to biases
                        prior.mean = 0.0;
                    }
                    f(l.w + k, l.w_logvar.map(|o| o + k), wv[[i, j]], prior);
                }
            }
            for j in 0..l.fan_out {
                f(l.b + j, l.b_logvar.map(|o| o + j), bv[j], self.prior_of(layer, j));
            }
        }
    }

    /// Analytic `KL(q || p)` summed over every weight and bias.
    pub fn kl_to_prior(&self) -> f64 {
        let mut kl = 0.0;
        self.for_each_param(|m, _, v, prior| kl += gaussian_kl(self.params[m], v, prior));
        kl
    }

    /// Adds `scale * ∂KL/∂params` into `grad`.
    pub fn kl_gradient(&self, scale: f64, grad: &mut [f64]) {
        self.for_each_param(|m, lv, v, prior| {
            let s2 = prior.std * prior.std;
            grad[m] += scale * (self.params[m] - prior.mean) / s2;
            if let Some(lv) = lv {
                grad[lv] += scale * 0.5 * (v / s2 - 1.0);
            }
        });
    }

    /// Prior mean and std for every parameter in mean-layout order.
    pub fn prior_moments(&self) -> Vec<(usize, GaussianPrior)> {
        let mut out = Vec::new();
        self.for_each_param(|m, _, _, p| out.push((m, p)));
        out
    }

    /// Posterior variance for every mean index, in the same order as
    /// [`Self::prior_moments`].
    pub fn posterior_variances(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(|_, _, v, _| out.push(v));
        out
    }

    /// A deterministic network whose parameters are `θ = μ_p + σ_p ε`
    /// for the supplied standard-normal vector `eps`.
    pub fn from_prior_draw(
        arch: MlpArchitecture,
        groups: Vec<OutputGroup>,
        prior: PriorConfig,
        eps: &[f64],
    ) -> Result<Self> {
        let mut net = BayesianMlp::new(arch, groups, prior, VarianceMode::Fixed { sigma: 0.0 })?;
        if eps.len() != net.num_params() {
            return Err(Error::Structural(format!(
                "prior draw needs {} standard normals, got {}",
                net.num_params(),
                eps.len()
            )));
        }
        for (m, p) in net.prior_moments() {
            net.params[m] = p.mean + p.std * eps[m];
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_net(mode: VarianceMode, seed: u64) -> BayesianMlp {
        let arch = MlpArchitecture::new(2, vec![3], 4);
        let mut net = BayesianMlp::new(arch, OutputGroup::flow_layout(1), PriorConfig::default(), mode).unwrap();
        net.init_posterior(seed, 0.3).unwrap();
        net
    }

    #[test]
    fn zero_variance_is_plain_mlp() {
        let net = small_net(VarianceMode::Fixed { sigma: 0.0 }, 1);
        let mut net = net;
        net.mode = VarianceMode::Fixed { sigma: 0.0 };
        let x = array![[0.5, -1.0], [2.0, 0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _, _) = net.forward_local_reparam(x.view(), &mut rng).unwrap();
        let h = (x.dot(&net.weight_view(0)) + &net.bias_view(0)).mapv(f64::tanh);
        let plain = h.dot(&net.weight_view(1)) + &net.bias_view(1);
        for (a, b) in out.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_linear_unit() {
        let arch = MlpArchitecture::new(1, vec![], 1);
        let mut net =
            BayesianMlp::new(arch, vec![OutputGroup::Generic], PriorConfig::default(), VarianceMode::Fixed { sigma: 0.0 })
                .unwrap();
        net.params_mut()[0] = 1.0;
        let x = array![[2.0]];
        let out = net.forward(x.view(), &net.zero_noise(1)).unwrap().output;
        assert_eq!(out[[0, 0]], 2.0);
    }

    #[test]
    fn lambda_zero_gives_bias_pathway() {
        let mut net = small_net(VarianceMode::Fixed { sigma: 0.0 }, 2);
        net.mode = VarianceMode::Fixed { sigma: 0.0 };
        let l = net.layout[1];
        for (j, b) in net.params[l.b..l.b + 4].iter_mut().enumerate() {
            *b = j as f64 - 1.5;
        }
        net.prior.lambda = 0.0;
        let x = array![[0.5, -1.0], [2.0, 0.3], [-3.0, 1.0]];
        let out = net.forward_mean(x.view()).unwrap();
        for row in out.rows() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, j as f64 - 1.5);
            }
        }
    }

    #[test]
    fn lambda_scales_deviation_linearly() {
        let mut net = small_net(VarianceMode::Fixed { sigma: 0.0 }, 3);
        net.mode = VarianceMode::Fixed { sigma: 0.0 };
        let x = array![[0.5, -1.0], [2.0, 0.3]];
        net.prior.lambda = 0.0;
        let base = net.forward_mean(x.view()).unwrap();
        net.prior.lambda = 1.0;
        let one = net.forward_mean(x.view()).unwrap();
        net.prior.lambda = 2.5;
        let scaled = net.forward_mean(x.view()).unwrap();
        for ((b, o), s) in base.iter().zip(one.iter()).zip(scaled.iter()) {
            assert!(((s - b) - 2.5 * (o - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = small_net(VarianceMode::Learned, 7);
        let b = small_net(VarianceMode::Learned, 7);
        assert_eq!(a, b);
        for (layer, l) in a.layout.iter().enumerate() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(a.weight_view(layer).iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn sigma_init_sets_variances() {
        let arch = MlpArchitecture::new(2, vec![5], 4);
        for mode in [VarianceMode::Learned, VarianceMode::Fixed { sigma: 1.0 }] {
            let mut net = BayesianMlp::new(arch.clone(), OutputGroup::flow_layout(1), PriorConfig::default(), mode).unwrap();
            net.init_posterior(0, 1e-5).unwrap();
            for v in net.posterior_variances() {
                assert!((v - 1e-10).abs() < 1e-24, "{}", v);
            }
        }
    }

    #[test]
    fn kl_is_zero_when_posterior_equals_prior() {
        let mut net = small_net(VarianceMode::Learned, 4);
        for (m, p) in net.prior_moments() {
            net.params[m] = p.mean;
        }
        // per-parameter log-variance equal to the prior's
        let stds: Vec<f64> = net.prior_moments().iter().map(|(_, p)| p.std).collect();
        let mut i = 0;
        for l in net.layout.clone() {
            for k in 0..l.fan_in * l.fan_out {
                net.params[l.w_logvar.unwrap() + k] = (stds[i] * stds[i]).ln();
                i += 1;
            }
            for k in 0..l.fan_out {
                net.params[l.b_logvar.unwrap() + k] = (stds[i] * stds[i]).ln();
                i += 1;
            }
        }
        assert_eq!(net.kl_to_prior(), 0.0);
    }

    #[test]
    fn kl_single_parameter() {
        assert!((gaussian_kl(1.0, 1.0, GaussianPrior::new(0.0, 1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn output_group_priors_are_used() {
        let arch = MlpArchitecture::new(1, vec![], 4);
        let net = BayesianMlp::new(arch, OutputGroup::flow_layout(1), PriorConfig::default(), VarianceMode::Learned).unwrap();
        let moments = net.prior_moments();
        // weights first: all zero-mean
        assert!(moments[..4].iter().all(|(_, p)| p.mean == 0.0));
        // biases: α̂ has mean 1
        assert_eq!(moments[4].1, GaussianPrior::new(1.0, 1.0));
        assert_eq!(moments[5].1, GaussianPrior::new(0.0, 1.0));
    }

    #[test]
    fn local_reparam_moments_single_layer() {
        let arch = MlpArchitecture::new(3, vec![], 2);
        let mut net = BayesianMlp::new(arch, vec![OutputGroup::Generic; 2], PriorConfig::default(), VarianceMode::Learned).unwrap();
        net.init_posterior(5, 0.5).unwrap();
        let l = net.layout[0];
        for (k, p) in net.params[l.w_logvar.unwrap()..l.w_logvar.unwrap() + 6].iter_mut().enumerate() {
            *p = (0.1 + 0.2 * k as f64).ln();
        }
        net.params[l.b] = 0.4;
        let h = array![[0.7, -1.2, 2.0]];
        let n = 100_000;
        let x = Array2::from_shape_fn((n, 3), |(_, j)| h[[0, j]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, _, _) = net.forward_local_reparam(x.view(), &mut rng).unwrap();
        let (wv, bv) = net.variances(0);
        let want_mean = h.dot(&net.weight_view(0)) + &net.bias_view(0);
        let want_var = h.mapv(|v| v * v).dot(&wv) + &bv;
        for j in 0..2 {
            let col = out.column(j);
            let mean = col.mean().unwrap();
            let var = col.var(1.0);
            let se_mean = (want_var[[0, j]] / n as f64).sqrt();
            let se_var = want_var[[0, j]] * (2.0 / n as f64).sqrt();
            assert!((mean - want_mean[[0, j]]).abs() < 3.0 * se_mean);
            assert!((var - want_var[[0, j]]).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn analytic_kl_matches_monte_carlo() {
        let mut net = small_net(VarianceMode::Learned, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for l in net.layout.clone() {
            for k in 0..l.fan_in * l.fan_out {
                net.params[l.w_logvar.unwrap() + k] = rng.random_range(-2.0..0.5);
            }
            for k in 0..l.fan_out {
                net.params[l.b_logvar.unwrap() + k] = rng.random_range(-2.0..0.5);
            }
        }
        let moments = net.prior_moments();
        let vars = net.posterior_variances();
        let draws = 200_000;
        let mut acc = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut s = 0.0;
            for ((m, p), &v) in moments.iter().zip(&vars) {
                let e: f64 = rng.sample(StandardNormal);
                let th = net.params[*m] + v.sqrt() * e;
                let lq = -0.5 * e * e - 0.5 * v.ln();
                let z = (th - p.mean) / p.std;
                let lp = -0.5 * z * z - p.std.ln();
                s += lq - lp;
            }
            acc.push(s);
        }
        let (mean, sem) = crate::numeric::mean_and_sem(&acc);
        let kl = net.kl_to_prior();
        assert!((mean - kl).abs() < 3.0 * sem, "mc {} ± {} vs {}", mean, sem, kl);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let net = small_net(VarianceMode::Learned, 12);
        let mut grad = vec![0.0; net.num_params()];
        net.kl_gradient(1.0, &mut grad);
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let fp = p.kl_to_prior();
            p.params[i] -= 2.0 * h;
            let fm = p.kl_to_prior();
            let fd = (fp - fm) / (2.0 * h);
            let err = crate::tape::relative_error(grad[i], fd);
            assert!(err < 1e-6 || (grad[i] - fd).abs() < 1e-9, "param {}: {} vs {}", i, grad[i], fd);
        }
    }

    fn check_backward(mode: VarianceMode, lambda: f64) {
        let mut net = small_net(mode, 13);
        net.prior.lambda = lambda;
        if let VarianceMode::Fixed { .. } = mode {
            net.mode = VarianceMode::Fixed { sigma: 0.2 };
        }
        let x = array![[0.5, -1.0], [2.0, 0.3], [-0.4, 0.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let noise = net.draw_noise(3, &mut rng);
        let weights = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.3));
        let objective = |n: &BayesianMlp| -> f64 {
            let out = n.forward(x.view(), &noise).unwrap().output;
            (&out * &weights).sum()
        };
        let pass = net.forward(x.view(), &noise).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        let gx = net.backward(&pass, &noise, weights.view(), &mut grad);
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let fp = objective(&p);
            p.params[i] -= 2.0 * h;
            let fm = objective(&p);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                crate::tape::relative_error(grad[i], fd) < 1e-6 || (grad[i] - fd).abs() < 1e-8,
                "param {}: {} vs {}",
                i,
                grad[i],
                fd
            );
        }
        // input gradient
        for r in 0..3 {
            for c in 0..2 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let fp = (&net.forward(xp.view(), &noise).unwrap().output * &weights).sum();
                xp[[r, c]] -= 2.0 * h;
                let fm = (&net.forward(xp.view(), &noise).unwrap().output * &weights).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((gx[[r, c]] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_learned() {
        check_backward(VarianceMode::Learned, 1.0);
        check_backward(VarianceMode::Learned, 0.6);
    }

    #[test]
    fn backward_matches_finite_differences_fixed() {
        check_backward(VarianceMode::Fixed { sigma: 0.2 }, 1.0);
        check_backward(VarianceMode::Fixed { sigma: 0.2 }, 1.7);
    }

    #[test]
    fn rejects_bad_shapes() {
        let arch = MlpArchitecture::new(2, vec![3], 4);
        assert!(BayesianMlp::new(arch.clone(), vec![OutputGroup::Generic; 3], PriorConfig::default(), VarianceMode::Learned).is_err());
        let net = small_net(VarianceMode::Learned, 0);
        let x = Array2::zeros((2, 3));
        assert!(net.forward(x.view(), &net.zero_noise(2)).is_err());
    }

    #[test]
    fn prior_draw_uses_group_moments() {
        let arch = MlpArchitecture::new(1, vec![2], 4);
        let mut prior = PriorConfig::default();
        prior.beta_hat.std = 0.0001;
        let n = BayesianMlp::new(arch.clone(), OutputGroup::flow_layout(1), prior.clone(), VarianceMode::Learned).unwrap();
        let eps = vec![1.0; BayesianMlp::new(arch.clone(), OutputGroup::flow_layout(1), prior.clone(), VarianceMode::Fixed { sigma: 0.0 }).unwrap().num_params()];
        let _ = n;
        let net = BayesianMlp::from_prior_draw(arch, OutputGroup::flow_layout(1), prior, &eps).unwrap();
        let l = net.layout[1];
        // α̂ bias = 1 + 1·1, β̂ bias = 0 + 1e-4
        assert_eq!(net.params[l.b], 2.0);
        assert!((net.params[l.b + 1] - 1e-4).abs() < 1e-18);
    }
}
