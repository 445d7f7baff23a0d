//! Datasets: CSV ingestion, z-score normalisation, cyclic hour encoding,
//! deterministic splits and synthetic generators with closed-form truth.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, normal_log_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    /// Raw hour of day in `[0, 24)`; expands to `(sin, cos)`.
    CyclicHour,
    /// Already encoded (`sin`/`cos` of an hour); never rescaled.
    Encoded,
}

/// Which CSV columns are targets and which features are cyclic hours.
/// Features default to every non-target column in file order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub targets: Vec<String>,
    pub features: Option<Vec<String>>,
    pub cyclic: Vec<String>,
}

impl Schema {
    pub fn new(targets: &[&str]) -> Self {
        Schema {
            targets: targets.iter().map(|s| s.to_string()).collect(),
            ..Schema::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub features: Array2<f64>,
    pub target_names: Vec<String>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        kinds: Vec<ColumnKind>,
        features: Array2<f64>,
        target_names: Vec<String>,
        targets: Array2<f64>,
    ) -> Result<Self> {
        if feature_names.len() != features.ncols() || kinds.len() != features.ncols() {
            return Err(Error::Structural("feature names, kinds and columns disagree".into()));
        }
        if target_names.len() != targets.ncols() || targets.nrows() != features.nrows() {
            return Err(Error::Structural("target names, columns and rows disagree".into()));
        }
        Ok(Dataset {
            feature_names,
            kinds,
            features,
            target_names,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            kinds: self.kinds.clone(),
            features: self.features.select(Axis(0), idx),
            target_names: self.target_names.clone(),
            targets: self.targets.select(Axis(0), idx),
        }
    }

    /// Column of target `t` as a vector.
    pub fn target(&self, t: usize) -> Vec<f64> {
        self.targets.column(t).to_vec()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Features then targets, with a header; floats are written in their
    /// shortest round-tripping form.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<&str> = self
            .feature_names
            .iter()
            .chain(self.target_names.iter())
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .features
                .row(i)
                .iter()
                .chain(self.targets.row(i).iter())
                .map(|v| format!("{:?}", v))
                .collect();
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Structural(format!("{}: {}", path.display(), e)),
    }
}

/// Parses a numeric CSV with a header row.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Structural(format!("{}: empty file", path.display())));
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Structural(format!("{}: missing column '{}'", path.display(), name)))
    };
    if schema.targets.is_empty() {
        return Err(Error::Config("schema names no target column".into()));
    }
    let t_idx: Vec<usize> = schema.targets.iter().map(|t| col(t)).collect::<Result<_>>()?;
    let f_names: Vec<String> = match &schema.features {
        Some(f) => f.clone(),
        None => header.iter().filter(|h| !schema.targets.contains(h)).cloned().collect(),
    };
    let f_idx: Vec<usize> = f_names.iter().map(|f| col(f)).collect::<Result<_>>()?;
    for c in &schema.cyclic {
        if !f_names.contains(c) {
            return Err(Error::Structural(format!("cyclic column '{}' is not a feature", c)));
        }
    }
    let kinds = f_names
        .iter()
        .map(|n| {
            if schema.cyclic.contains(n) {
                ColumnKind::CyclicHour
            } else {
                ColumnKind::Numeric
            }
        })
        .collect();

    let mut feats = Vec::new();
    let mut targs = Vec::new();
    let mut bad_rows = Vec::new();
    let mut n = 0;
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::Structural(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                line,
                rec.len(),
                header.len()
            )));
        }
        let parse = |i: usize| rec[i].parse::<f64>().ok().filter(|v| v.is_finite());
        let f: Option<Vec<f64>> = f_idx.iter().map(|&i| parse(i)).collect();
        let t: Option<Vec<f64>> = t_idx.iter().map(|&i| parse(i)).collect();
        match (f, t) {
            (Some(f), Some(t)) => {
                feats.extend(f);
                targs.extend(t);
                n += 1;
            }
            _ => bad_rows.push(line),
        }
    }
    if !bad_rows.is_empty() {
        let shown: Vec<String> = bad_rows.iter().take(20).map(|r| r.to_string()).collect();
        return Err(Error::Data(format!(
            "{}: {} rows with non-numeric cells (rows {}{})",
            path.display(),
            bad_rows.len(),
            shown.join(", "),
            if bad_rows.len() > 20 { ", ..." } else { "" }
        )));
    }
    if n == 0 {
        return Err(Error::Structural(format!("{}: no data rows", path.display())));
    }
    Dataset::new(
        f_names,
        kinds,
        Array2::from_shape_vec((n, f_idx.len()), feats).expect("shape"),
        schema.targets.clone(),
        Array2::from_shape_vec((n, t_idx.len()), targs).expect("shape"),
    )
}

/// `(sin, cos)` of `2π · hour / 24`.
pub fn encode_hour(hour: f64) -> (f64, f64) {
    let a = 2.0 * PI * hour / 24.0;
    (a.sin(), a.cos())
}

/// Training-split statistics. `feature_mean/std` are per raw feature;
/// cyclic and encoded columns carry `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_names: Vec<String>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn population_moments(col: ndarray::ArrayView1<'_, f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot normalise an empty dataset".into()));
        }
        let mut fm = Vec::new();
        let mut fs = Vec::new();
        for (j, kind) in train.kinds.iter().enumerate() {
            if *kind == ColumnKind::Numeric {
                let (m, s) = population_moments(train.features.column(j));
                if !(s > 0.0) {
                    return Err(Error::Structural(format!(
                        "feature column '{}' is constant",
                        train.feature_names[j]
                    )));
                }
                fm.push(m);
                fs.push(s);
            } else {
                fm.push(0.0);
                fs.push(1.0);
            }
        }
        let mut tm = Vec::new();
        let mut ts = Vec::new();
        for j in 0..train.targets.ncols() {
            let (m, s) = population_moments(train.targets.column(j));
            if !(s > 0.0) {
                return Err(Error::Structural(format!(
                    "target column '{}' is constant",
                    train.target_names[j]
                )));
            }
            tm.push(m);
            ts.push(s);
        }
        Ok(NormStats {
            feature_names: train.feature_names.clone(),
            kinds: train.kinds.clone(),
            feature_mean: fm,
            feature_std: fs,
            target_names: train.target_names.clone(),
            target_mean: tm,
            target_std: ts,
        })
    }

    /// Number of network input columns after encoding.
    pub fn encoded_dim(&self) -> usize {
        self.kinds
            .iter()
            .map(|k| if *k == ColumnKind::CyclicHour { 2 } else { 1 })
            .sum()
    }

    /// Names of the encoded columns, for each raw feature in order.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (n, k) in self.feature_names.iter().zip(&self.kinds) {
            if *k == ColumnKind::CyclicHour {
                out.push(format!("{}_sin", n));
                out.push(format!("{}_cos", n));
            } else {
                out.push(n.clone());
            }
        }
        out
    }

    /// `Σ_t ln(1 / std_t)`: add to a normalised log density to get raw units.
    pub fn log_jacobian(&self) -> f64 {
        -self.target_std.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub fn normalize_target(&self, t: usize, y: f64) -> f64 {
        (y - self.target_mean[t]) / self.target_std[t]
    }

    pub fn denormalize_target(&self, t: usize, z: f64) -> f64 {
        z * self.target_std[t] + self.target_mean[t]
    }

    pub fn normalize_feature(&self, j: usize, v: f64) -> f64 {
        (v - self.feature_mean[j]) / self.feature_std[j]
    }

    /// Encodes and rescales `ds` using these (training) statistics.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.feature_names != self.feature_names || ds.target_names != self.target_names {
            return Err(Error::Structural(format!(
                "dataset columns {:?} -> {:?} do not match statistics {:?} -> {:?}",
                ds.feature_names, ds.target_names, self.feature_names, self.target_names
            )));
        }
        let n = ds.len();
        let mut x = Array2::zeros((n, self.encoded_dim()));
        let mut kinds = Vec::new();
        for kind in &self.kinds {
            if *kind == ColumnKind::CyclicHour {
                kinds.extend([ColumnKind::Encoded, ColumnKind::Encoded]);
            } else {
                kinds.push(*kind);
            }
        }
        for i in 0..n {
            let mut c = 0;
            for (j, kind) in self.kinds.iter().enumerate() {
                let v = ds.features[[i, j]];
                match kind {
                    ColumnKind::CyclicHour => {
                        let (s, co) = encode_hour(v);
                        x[[i, c]] = s;
                        x[[i, c + 1]] = co;
                        c += 2;
                    }
                    ColumnKind::Encoded => {
                        x[[i, c]] = v;
                        c += 1;
                    }
                    ColumnKind::Numeric => {
                        x[[i, c]] = self.normalize_feature(j, v);
                        c += 1;
                    }
                }
            }
        }
        let mut y = ds.targets.clone();
        for (t, mut col) in y.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| self.normalize_target(t, v));
        }
        Dataset::new(self.encoded_names(), kinds, x, ds.target_names.clone(), y)
    }
}

/// Fits statistics on `train` and applies them to it.
pub fn normalize(train: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(train)?;
    Ok((stats.apply(train)?, stats))
}

pub fn apply_stats(stats: &NormStats, other: &Dataset) -> Result<Dataset> {
    stats.apply(other)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled split of `n` rows. Sizes are
/// `round(n·f_train)`, `round(n·f_valid)` and the remainder.
pub fn split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", fractions)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * a).round() as usize;
    let n_valid = (((n as f64) * b).round() as usize).min(n - n_train);
    Ok(SplitIndices {
        train: idx[..n_train].to_vec(),
        valid: idx[n_train..n_train + n_valid].to_vec(),
        test: idx[n_train + n_valid..].to_vec(),
    })
}

/// One row index per line.
pub fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(idx.len() * 6);
    for i in idx {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}: line {} is not an index", path.display(), k + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyGenerator {
    HeteroscedasticBimodal,
    GaussianShift,
    SpatialTwoCluster,
}

impl ToyGenerator {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "heteroscedastic-bimodal" => Ok(ToyGenerator::HeteroscedasticBimodal),
            "gaussian-shift" => Ok(ToyGenerator::GaussianShift),
            "spatial-two-cluster" => Ok(ToyGenerator::SpatialTwoCluster),
            other => Err(Error::Config(format!(
                "unknown generator '{}' (expected heteroscedastic-bimodal, gaussian-shift or spatial-two-cluster)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyGenerator::HeteroscedasticBimodal => "heteroscedastic-bimodal",
            ToyGenerator::GaussianShift => "gaussian-shift",
            ToyGenerator::SpatialTwoCluster => "spatial-two-cluster",
        }
    }
}

/// Synthetic data plus the true `ln p(y | x)` of every row.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub data: Dataset,
    pub log_density: Vec<f64>,
}

/// Bimodal branch centres `x/2 ± sep(x)` and shared noise scale.
pub fn bimodal_params(x: f64) -> (f64, f64, f64) {
    let sep = 0.3 + 0.35 * (x + 2.0);
    let sd = 0.1 + 0.05 * (x + 2.0);
    (0.5 * x - sep, 0.5 * x + sep, sd)
}

pub fn bimodal_log_density(x: f64, y: f64) -> f64 {
    let (lo, hi, sd) = bimodal_params(x);
    log_sum_exp(&[normal_log_pdf(y, lo, sd), normal_log_pdf(y, hi, sd)]) - 2f64.ln()
}

pub const SHIFT_NOISE_SD: f64 = 0.1;

/// Two blobs `(centre, sd)` and the weight of the first, given the numeric
/// feature `u` and the hour.
pub fn spatial_params(u: f64, hour: f64) -> ([(f64, f64); 2], [f64; 2], f64) {
    let (s, _) = encode_hour(hour);
    let w = 0.5 + 0.3 * s;
    ([(-1.0 + 0.4 * u, 0.6), (1.0, -0.5 + 0.4 * u)], [0.3, 0.45], w)
}

pub fn spatial_log_density(u: f64, hour: f64, y1: f64, y2: f64) -> f64 {
    let (c, sd, w) = spatial_params(u, hour);
    let comp = |k: usize| normal_log_pdf(y1, c[k].0, sd[k]) + normal_log_pdf(y2, c[k].1, sd[k]);
    log_sum_exp(&[w.ln() + comp(0), (1.0 - w).ln() + comp(1)])
}

pub fn toy_generator(gen: ToyGenerator, n: usize, seed: u64) -> Result<ToyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match gen {
        ToyGenerator::HeteroscedasticBimodal | ToyGenerator::GaussianShift => {
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            let mut lp = Vec::with_capacity(n);
            let mut urng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            for _ in 0..n {
                let e = z();
                let y;
                let x;
                if gen == ToyGenerator::GaussianShift {
                    x = urng.random_range(-3.0..3.0);
                    y = f64::sin(x) + SHIFT_NOISE_SD * e;
                    lp.push(normal_log_pdf(y, f64::sin(x), SHIFT_NOISE_SD));
                } else {
                    x = urng.random_range(-2.0..2.0);
                    let (lo, hi, sd) = bimodal_params(x);
                    let c = if urng.random::<bool>() { hi } else { lo };
                    y = c + sd * e;
                    lp.push(bimodal_log_density(x, y));
                }
                xs.push(x);
                ys.push(y);
            }
            let data = Dataset::new(
                names(&["x"]),
                vec![ColumnKind::Numeric],
                Array2::from_shape_vec((n, 1), xs).expect("shape"),
                names(&["y"]),
                Array2::from_shape_vec((n, 1), ys).expect("shape"),
            )?;
            Ok(ToyData { data, log_density: lp })
        }
        ToyGenerator::SpatialTwoCluster => {
            let mut urng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut feats = Vec::with_capacity(2 * n);
            let mut targs = Vec::with_capacity(2 * n);
            let mut lp = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = urng.random_range(-1.0..1.0);
                let hour: f64 = urng.random_range(0.0..24.0);
                let (c, sd, w) = spatial_params(u, hour);
                let k = if urng.random::<f64>() < w { 0 } else { 1 };
                let y1 = c[k].0 + sd[k] * z();
                let y2 = c[k].1 + sd[k] * z();
                feats.extend([u, hour]);
                targs.extend([y1, y2]);
                lp.push(spatial_log_density(u, hour, y1, y2));
            }
            let data = Dataset::new(
                names(&["u", "hour"]),
                vec![ColumnKind::Numeric, ColumnKind::CyclicHour],
                Array2::from_shape_vec((n, 2), feats).expect("shape"),
                names(&["long", "lat"]),
                Array2::from_shape_vec((n, 2), targs).expect("shape"),
            )?;
            Ok(ToyData { data, log_density: lp })
        }
    }
}
