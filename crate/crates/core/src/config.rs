//! Flat `key = value` run configuration.
//!
//! Every key has a documented default ([`KEYS`]). Files may contain `#`
//! comments; unknown keys and unparsable values are all reported in one
//! error. A manifest is a config file with every key spelled out plus
//! commented provenance lines, so it can be fed straight back in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::bnn::{GaussianPrior, PriorConfig, VarianceMode};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::inference::TrainConfig;

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("command", "", "subcommand recorded by manifests"),
    ("data", "", "input CSV with a header row"),
    ("targets", "y", "target column(s); two names select the autoregressive 2D model"),
    ("features", "", "feature columns (empty: every non-target column)"),
    ("cyclic", "", "feature columns holding an hour of day"),
    ("split", "0.8,0.1,0.1", "train,valid,test fractions"),
    ("split_seed", "0", "seed of the row shuffle"),
    ("head", "nf", "likelihood head: nf, mdn, lv or gauss"),
    ("k", "5", "radial flow stages"),
    ("c", "5", "mixture components"),
    ("lv_samples", "5", "noise samples per datum for the lv head"),
    ("noise_dim", "1", "noise inputs for the lv head"),
    ("hidden", "50", "hidden layer widths, comma separated (empty: linear)"),
    ("variance", "fixed", "posterior variances: fixed (tied) or learned"),
    ("sigma_q", "1e-5", "posterior std: the tied value, or the initial value when learned"),
    ("sigma_w", "1", "prior std of hidden-layer weights and biases"),
    ("lambda", "1", "heteroscedasticity scale on output-layer weights"),
    ("mu_alpha", "1", "prior mean of alpha_hat biases"),
    ("sigma_alpha", "1", "prior std of alpha_hat outputs"),
    ("mu_beta", "0", "prior mean of beta_hat biases"),
    ("sigma_beta", "1", "prior std of beta_hat outputs"),
    ("mu_gamma", "0", "prior mean of gamma biases"),
    ("sigma_gamma", "1", "prior std of gamma outputs"),
    ("mu_shift", "0", "prior mean of the shift bias"),
    ("sigma_shift", "1", "prior std of the shift output"),
    ("learning_rate", "0.005", "Adam step size"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.99", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator offset"),
    ("iterations", "5000", "optimisation steps"),
    ("batch_size", "0", "minibatch size (0: full batch)"),
    ("mc_train", "20", "weight samples per free-energy estimate"),
    ("mc_test", "20", "weight samples per predictive density"),
    ("seed", "0", "seed for initialisation, training and evaluation"),
    ("raw_units", "true", "report log densities in original target units"),
    ("out", "run", "output directory, relative to $BNFLOW_OUT when set"),
    ("checkpoint", "", "checkpoint for eval, sample and heatmap"),
    ("eval_split", "test", "rows to evaluate: train, valid, test or all"),
    ("sample_n", "1000", "draws per condition for sample"),
    ("condition", "", "known raw feature values, name=value pairs separated by commas"),
    ("x_feature", "", "feature on the heatmap x axis for 1D models (empty: first feature)"),
    ("x_range", "auto", "lo:hi:points for the heatmap x axis (auto: train mean +- 3 std)"),
    ("y_range", "auto", "lo:hi:points for the heatmap y axis (auto: train mean +- 3 std)"),
    ("cap", "none", "upper clip for emitted heatmap densities (none: uncapped)"),
    ("marginal_samples", "20", "draws of unobserved features per heatmap column or cell"),
    ("prior_seeds", "0,1,2", "network draws for prior-sample"),
    ("prior_lambdas", "1", "lambda values for prior-sample"),
    ("prior_sigma_betas", "0,1", "sigma_beta values for prior-sample"),
    ("prior_x_range", "-3:3:61", "lo:hi:points of the prior-sample input axis"),
    ("prior_y_range", "-6:6:241", "lo:hi:points of the prior-sample target axis"),
    ("grid_sigma_beta", "1", "grid-search values of sigma_beta"),
    ("grid_lambda", "1", "grid-search values of lambda"),
    ("grid_sigma_w", "1", "grid-search values of sigma_w"),
    ("grid_sigma_q", "1e-5", "grid-search values of sigma_q"),
    ("generator", "heteroscedastic-bimodal", "gen-toy generator"),
    ("n", "5000", "gen-toy rows"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut bad = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        bad.push(format!("line {}: {}", n + 1, e));
                    }
                }
                None => bad.push(format!("line {}: expected 'key = value', got '{}'", n + 1, line)),
            }
        }
        cfg.report(bad)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if !is_known(key) {
            return Err(format!("unknown key '{}'", key));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides, reporting every unknown key at once.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        let mut bad = Vec::new();
        for p in pairs {
            match p.as_ref().split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        bad.push(e);
                    }
                }
                None => bad.push(format!("override '{}' is not key=value", p.as_ref())),
            }
        }
        self.report(bad)
    }

    /// Fails with `bad` plus any value errors, so one message lists all.
    fn report(&self, mut bad: Vec<String>) -> Result<()> {
        if bad.is_empty() {
            return Ok(());
        }
        if let Err(Error::Config(m)) = self.typed() {
            bad.push(m);
        }
        Err(Error::Config(bad.join("; ")))
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        assert!(is_known(key), "unknown key {}", key);
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {}", key))
    }

    /// Every key in table order, then the commented provenance lines.
    pub fn to_manifest(&self, provenance: &[(&str, String)]) -> String {
        let mut s = String::new();
        for (k, v) in provenance {
            s.push_str(&format!("# {} = {}\n", k, v));
        }
        for (k, _, _) in KEYS {
            s.push_str(&format!("{} = {}\n", k, self.get(k)));
        }
        s
    }

    pub fn typed(&self) -> Result<Settings> {
        let mut p = Parser { cfg: self, errors: Vec::new() };
        let settings = Settings::from_parser(&mut p);
        if p.errors.is_empty() {
            Ok(settings)
        } else {
            Err(Error::Config(p.errors.join("; ")))
        }
    }
}

/// Reads a `# key = value` provenance line from manifest text.
pub fn provenance(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let rest = l.trim().strip_prefix('#')?;
        let (k, v) = rest.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

struct Parser<'a> {
    cfg: &'a RunConfig,
    errors: Vec<String>,
}

impl Parser<'_> {
    fn raw(&self, key: &str) -> &str {
        self.cfg.get(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, fallback: T) -> T {
        match self.raw(key).parse() {
            Ok(v) => v,
            Err(_) => {
                self.errors.push(format!("{} = '{}' is not valid", key, self.raw(key)));
                fallback
            }
        }
    }

    fn f64(&mut self, key: &str) -> f64 {
        let v = self.parse(key, f64::NAN);
        if !v.is_finite() && self.raw(key).parse::<f64>().is_ok() {
            self.errors.push(format!("{} must be finite", key));
        }
        v
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Vec<T> {
        let raw = self.raw(key).to_string();
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.parse() {
                Ok(v) => out.push(v),
                Err(_) => self.errors.push(format!("{}: '{}' is not valid", key, part)),
            }
        }
        out
    }

    fn names(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    fn range(&mut self, key: &str) -> Option<AxisRange> {
        let raw = self.raw(key).to_string();
        if raw == "auto" {
            return None;
        }
        match AxisRange::parse(&raw) {
            Ok(r) => Some(r),
            Err(e) => {
                self.errors.push(format!("{}: {}", key, e));
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl AxisRange {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("'{}' is not lo:hi:points", s);
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let points: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo < hi) || points < 2 {
            return Err(format!("'{}' needs lo < hi and at least 2 points", s));
        }
        Ok(AxisRange { lo, hi, points })
    }

    pub fn grid(&self) -> Vec<f64> {
        crate::numeric::linspace(self.lo, self.hi, self.points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
    All,
}

/// Typed view of a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Settings {
    pub data: String,
    pub targets: Vec<String>,
    pub features: Option<Vec<String>>,
    pub cyclic: Vec<String>,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub head: Head,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub mode: VarianceMode,
    pub sigma_q: f64,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub raw_units: bool,
    pub out: String,
    pub checkpoint: String,
    pub eval_split: EvalSplit,
    pub sample_n: usize,
    pub condition: Vec<(String, f64)>,
    pub x_feature: Option<String>,
    pub x_range: Option<AxisRange>,
    pub y_range: Option<AxisRange>,
    pub cap: Option<f64>,
    pub marginal_samples: usize,
    pub prior_seeds: Vec<u64>,
    pub prior_lambdas: Vec<f64>,
    pub prior_sigma_betas: Vec<f64>,
    pub prior_x_range: Option<AxisRange>,
    pub prior_y_range: Option<AxisRange>,
    pub grid_sigma_beta: Vec<f64>,
    pub grid_lambda: Vec<f64>,
    pub grid_sigma_w: Vec<f64>,
    pub grid_sigma_q: Vec<f64>,
    pub generator: String,
    pub n: usize,
}

impl Settings {
    fn from_parser(p: &mut Parser<'_>) -> Self {
        let k = p.parse("k", 5usize);
        let c = p.parse("c", 5usize);
        let lv_samples = p.parse("lv_samples", 5usize);
        let noise_dim = p.parse("noise_dim", 1usize);
        let head = match p.raw("head") {
            "nf" => Head::Flow { k },
            "mdn" => Head::Mdn { c },
            "lv" => Head::LatentVariable { noise_dim, samples: lv_samples },
            "gauss" => Head::Gaussian,
            other => {
                p.errors.push(format!("head = '{}' is not one of nf, mdn, lv, gauss", other));
                Head::Flow { k }
            }
        };
        if let Err(e) = head.validate() {
            p.errors.push(e.to_string());
        }
        let sigma_q = p.f64("sigma_q");
        let mode = match p.raw("variance") {
            "fixed" => VarianceMode::Fixed { sigma: sigma_q },
            "learned" => VarianceMode::Learned,
            other => {
                p.errors.push(format!("variance = '{}' is not fixed or learned", other));
                VarianceMode::Learned
            }
        };
        if !(sigma_q > 0.0) {
            p.errors.push("sigma_q must be > 0".into());
        }
        let prior = PriorConfig {
            sigma_w: p.f64("sigma_w"),
            lambda: p.f64("lambda"),
            alpha_hat: GaussianPrior::new(p.f64("mu_alpha"), p.f64("sigma_alpha")),
            beta_hat: GaussianPrior::new(p.f64("mu_beta"), p.f64("sigma_beta")),
            gamma: GaussianPrior::new(p.f64("mu_gamma"), p.f64("sigma_gamma")),
            shift: GaussianPrior::new(p.f64("mu_shift"), p.f64("sigma_shift")),
        };
        if let Err(e) = prior.validate_for_sampling() {
            p.errors.push(e.to_string());
        }
        let batch: usize = p.parse("batch_size", 0);
        let train = TrainConfig {
            learning_rate: p.f64("learning_rate"),
            adam_beta1: p.f64("adam_beta1"),
            adam_beta2: p.f64("adam_beta2"),
            adam_eps: p.f64("adam_eps"),
            iterations: p.parse("iterations", 0),
            batch_size: if batch == 0 { None } else { Some(batch) },
            mc_samples_train: p.parse("mc_train", 1),
            mc_samples_test: p.parse("mc_test", 1),
            seed: p.parse("seed", 0),
        };
        if let Err(e) = train.validate() {
            p.errors.push(e.to_string());
        }
        let fr: Vec<f64> = p.list("split");
        let split = if fr.len() == 3 {
            (fr[0], fr[1], fr[2])
        } else {
            p.errors.push("split needs three fractions".into());
            (0.8, 0.1, 0.1)
        };
        let targets = p.names("targets");
        if targets.is_empty() || targets.len() > 2 {
            p.errors.push(format!("targets must name one or two columns, got {}", targets.len()));
        }
        let features = p.names("features");
        let raw_units = p.parse("raw_units", true);
        let eval_split = match p.raw("eval_split") {
            "train" => EvalSplit::Train,
            "valid" => EvalSplit::Valid,
            "test" => EvalSplit::Test,
            "all" => EvalSplit::All,
            other => {
                p.errors.push(format!("eval_split = '{}' is not train, valid, test or all", other));
                EvalSplit::Test
            }
        };
        let mut condition = Vec::new();
        for part in p.names("condition") {
            match part.split_once('=').map(|(a, b)| (a.trim().to_string(), b.trim().parse::<f64>())) {
                Some((name, Ok(v))) => condition.push((name, v)),
                _ => p.errors.push(format!("condition entry '{}' is not name=value", part)),
            }
        }
        let cap = match p.raw("cap") {
            "none" | "" => None,
            _ => {
                let v = p.f64("cap");
                if !(v > 0.0) {
                    p.errors.push("cap must be positive".into());
                }
                Some(v)
            }
        };
        let x_feature = Some(p.raw("x_feature").to_string()).filter(|s| !s.is_empty());
        let marginal_samples = p.parse("marginal_samples", 1usize);
        if marginal_samples == 0 {
            p.errors.push("marginal_samples must be >= 1".into());
        }
        Settings {
            data: p.raw("data").to_string(),
            targets,
            features: if features.is_empty() { None } else { Some(features) },
            cyclic: p.names("cyclic"),
            split,
            split_seed: p.parse("split_seed", 0),
            head,
            k,
            hidden: p.list("hidden"),
            mode,
            sigma_q,
            prior,
            train,
            raw_units,
            out: p.raw("out").to_string(),
            checkpoint: p.raw("checkpoint").to_string(),
            eval_split,
            sample_n: p.parse("sample_n", 1),
            condition,
            x_feature,
            x_range: p.range("x_range"),
            y_range: p.range("y_range"),
            cap,
            marginal_samples,
            prior_seeds: p.list("prior_seeds"),
            prior_lambdas: p.list("prior_lambdas"),
            prior_sigma_betas: p.list("prior_sigma_betas"),
            prior_x_range: p.range("prior_x_range"),
            prior_y_range: p.range("prior_y_range"),
            grid_sigma_beta: p.list("grid_sigma_beta"),
            grid_lambda: p.list("grid_lambda"),
            grid_sigma_w: p.list("grid_sigma_w"),
            grid_sigma_q: p.list("grid_sigma_q"),
            generator: p.raw("generator").to_string(),
            n: p.parse("n", 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let s = RunConfig::default().typed().unwrap();
        assert_eq!(s.head, Head::Flow { k: 5 });
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.hidden, vec![50]);
        assert_eq!(s.mode, VarianceMode::Fixed { sigma: 1e-5 });
        assert_eq!(s.cap, None);
    }

    #[test]
    fn unknown_keys_are_listed_together() {
        let e = RunConfig::parse("head = mdn\nfoo = 1\n# ok\nbar = 2\n").unwrap_err().to_string();
        assert!(e.contains("'foo'") && e.contains("'bar'"), "{}", e);
        let mut c = RunConfig::default();
        let e = c.apply_overrides(&["k=3", "zz=1", "yy"]).unwrap_err().to_string();
        assert!(e.contains("'zz'") && e.contains("'yy'"));
    }

    #[test]
    fn bad_values_are_listed_together() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["head=xx", "learning_rate=-1", "split=0.5,0.5", "x_range=1:0:5"]).unwrap();
        let e = c.typed().unwrap_err().to_string();
        for word in ["head", "learning_rate", "split", "x_range"] {
            assert!(e.contains(word), "{} missing from {}", word, e);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["head=lv", "hidden=20,20", "condition=u=0.5,hour=3"]).unwrap();
        let text = c.to_manifest(&[("data_sha256", "abc".into())]);
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(provenance(&text, "data_sha256").as_deref(), Some("abc"));
        let s = back.typed().unwrap();
        assert_eq!(s.condition, vec![("u".to_string(), 0.5), ("hour".to_string(), 3.0)]);
        assert_eq!(s.hidden, vec![20, 20]);
    }

    #[test]
    fn ranges() {
        let r = AxisRange::parse("-1:1:5").unwrap();
        assert_eq!(r.grid(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(AxisRange::parse("1:2").is_err());
    }
}
