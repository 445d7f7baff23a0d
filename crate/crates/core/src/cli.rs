//! Subcommand implementations. Each command reads a [`RunConfig`], writes
//! its artifacts plus `manifest.txt` into the output directory, and returns
//! a one-line summary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autoreg::{density_grid, joint_log_density, AutoregModel, Slot};
use crate::checkpoint::{file_sha256, Checkpoint, Model, FORMAT_VERSION};
use crate::config::{provenance, AxisRange, EvalSplit, RunConfig, Settings};
use crate::data::{
    encode_hour, load_csv, split, toy_generator, write_indices, ColumnKind, Dataset, NormStats, Schema, ToyGenerator,
};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::inference::{draw_head_params, predictive_log_density, train, ConditionalModel, FreeEnergyReport};
use crate::numeric::{bisect_increasing, mean_and_sem};
use crate::prior::sample_prior_cde;

pub const OUT_ENV: &str = "BNFLOW_OUT";

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: String,
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let p = Path::new(&s.out);
    let dir = match std::env::var_os(OUT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, data_hash: Option<String>) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.insert("command", command);
    let mut prov = vec![("bnflow_version", env!("CARGO_PKG_VERSION").to_string())];
    if let Some(h) = data_hash {
        prov.push(("data_sha256", h));
    }
    write_file(&dir.join("manifest.txt"), &cfg.to_manifest(&prov))
}

/// Runs the subcommand named by `command`.
pub fn run(command: &str, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        "train" => cmd_train(cfg),
        "eval" => cmd_eval(cfg),
        "sample" => cmd_sample(cfg),
        "heatmap" => cmd_heatmap(cfg),
        "prior-sample" => cmd_prior_sample(cfg),
        "grid-search" => cmd_grid_search(cfg),
        "gen-toy" => cmd_gen_toy(cfg),
        other => Err(Error::Config(format!("unknown command '{}'", other))),
    }
}

/// Re-executes a manifest, refusing if its data file has changed.
pub fn rerun(manifest: &Path, overrides: &[String]) -> Result<Outcome> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_overrides(overrides)?;
    if let Some(want) = provenance(&text, "data_sha256") {
        let data = cfg.get("data").to_string();
        let got = file_sha256(Path::new(&data))?;
        if got != want {
            return Err(Error::Data(format!("{} changed since the manifest was written", data)));
        }
    }
    let command = cfg.get("command").to_string();
    run(&command, &cfg)
}

fn schema_of(s: &Settings) -> Schema {
    Schema {
        targets: s.targets.clone(),
        features: s.features.clone(),
        cyclic: s.cyclic.clone(),
    }
}

fn require_data(s: &Settings) -> Result<&Path> {
    if s.data.is_empty() {
        return Err(Error::Config("no data file given (set data = <path>)".into()));
    }
    Ok(Path::new(&s.data))
}

fn trace_csv(trace: &[FreeEnergyReport]) -> String {
    let mut s = String::from("iteration,expected_nll,kl,free_energy\n");
    for r in trace {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.iteration, r.expected_nll, r.kl, r.free_energy);
    }
    s
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    s.prior.validate()?;
    let path = require_data(&s)?;
    let hash = file_sha256(path)?;
    let ds = load_csv(path, &schema_of(&s))?;
    let sp = split(ds.len(), s.split, s.split_seed)?;
    if sp.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let train_raw = ds.subset(&sp.train);
    let stats = NormStats::fit(&train_raw)?;
    let tr = stats.apply(&train_raw)?;
    let dir = out_dir(&s)?;
    let dim = stats.encoded_dim();
    let (model, final_fe) = if s.targets.len() == 1 {
        let mut m = ConditionalModel::new(dim, s.hidden.clone(), s.head, s.prior.clone(), s.mode)?;
        m.net.init_posterior(s.train.seed, s.sigma_q)?;
        let trace = train(&mut m, tr.features.view(), tr.targets.column(0), &s.train)?;
        write_file(&dir.join("trace.csv"), &trace_csv(&trace))?;
        (Model::Conditional(m), trace.last().map(|r| r.free_energy))
    } else {
        if !matches!(s.head, Head::Flow { .. }) {
            return Err(Error::Config("two targets need head = nf".into()));
        }
        let order = [s.targets[0].clone(), s.targets[1].clone()];
        let mut m = AutoregModel::new(dim, s.hidden.clone(), s.k, s.prior.clone(), s.mode, order)?;
        m.init_posterior(s.train.seed, s.sigma_q)?;
        let (t1, t2) = m.train(tr.features.view(), tr.targets.column(0), tr.targets.column(1), &s.train)?;
        write_file(&dir.join("trace.csv"), &trace_csv(&t1))?;
        write_file(&dir.join("trace_second.csv"), &trace_csv(&t2))?;
        let fe = match (t1.last(), t2.last()) {
            (Some(a), Some(b)) => Some(a.free_energy + b.free_energy),
            _ => None,
        };
        (Model::Autoreg(m), fe)
    };
    let ck = Checkpoint {
        format_version: FORMAT_VERSION,
        model,
        stats,
        schema: schema_of(&s),
        split: sp.clone(),
        data: s.data.clone(),
        data_sha256: hash.clone(),
    };
    ck.save(&dir.join("checkpoint.json"))?;
    write_indices(&dir.join("train.idx"), &sp.train)?;
    write_indices(&dir.join("valid.idx"), &sp.valid)?;
    write_indices(&dir.join("test.idx"), &sp.test)?;
    write_manifest(&dir, cfg, "train", Some(hash))?;
    Ok(Outcome {
        summary: format!(
            "trained {} iterations on {} rows; final free energy {}",
            s.train.iterations,
            sp.train.len(),
            final_fe.map_or("n/a".to_string(), |v| format!("{:.6}", v))
        ),
        dir,
    })
}

fn load_checkpoint(s: &Settings) -> Result<Checkpoint> {
    if s.checkpoint.is_empty() {
        return Err(Error::Config("no checkpoint given (set checkpoint = <path>)".into()));
    }
    Checkpoint::load(Path::new(&s.checkpoint))
}

fn check_targets(s: &Settings, ck: &Checkpoint) -> Result<()> {
    if let Model::Autoreg(m) = &ck.model {
        if s.targets.len() == 2 {
            m.check_order(&[s.targets[0].clone(), s.targets[1].clone()])?;
        }
    }
    Ok(())
}

/// Per-row predictive log densities of a normalised dataset.
pub fn model_log_density(model: &Model, ds: &Dataset, mc: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match model {
        Model::Conditional(m) => predictive_log_density(m, ds.features.view(), ds.targets.column(0), mc, &mut rng),
        Model::Autoreg(m) => joint_log_density(
            m,
            ds.features.view(),
            ds.targets.column(0),
            ds.targets.column(1),
            mc,
            &mut rng,
        ),
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let ck = load_checkpoint(&s)?;
    check_targets(&s, &ck)?;
    let data = if s.data.is_empty() { ck.data.clone() } else { s.data.clone() };
    let path = Path::new(&data);
    let hash = file_sha256(path)?;
    let ds = load_csv(path, &ck.schema)?;
    let rows: Vec<usize> = if hash == ck.data_sha256 {
        match s.eval_split {
            EvalSplit::Train => ck.split.train.clone(),
            EvalSplit::Valid => ck.split.valid.clone(),
            EvalSplit::Test => ck.split.test.clone(),
            EvalSplit::All => (0..ds.len()).collect(),
        }
    } else {
        (0..ds.len()).collect()
    };
    if rows.is_empty() {
        return Err(Error::Data("no rows to evaluate".into()));
    }
    let norm = ck.stats.apply(&ds.subset(&rows))?;
    let mut lp = model_log_density(&ck.model, &norm, s.train.mc_samples_test, s.train.seed)?;
    if s.raw_units {
        let j = ck.stats.log_jacobian();
        lp.iter_mut().for_each(|v| *v += j);
    }
    let (mean, sem) = mean_and_sem(&lp);
    let dir = out_dir(&s)?;
    let mut csv = String::from("row,log_density\n");
    for (r, v) in rows.iter().zip(&lp) {
        let _ = writeln!(csv, "{},{:?}", r, v);
    }
    write_file(&dir.join("eval.csv"), &csv)?;
    let summary = format!("mean_ll = {:.6} +- {:.6} (SEM, n = {})", mean, sem, lp.len());
    write_file(&dir.join("summary.txt"), &format!("{}\n", summary))?;
    let mut used = cfg.clone();
    used.insert("data", data.clone());
    write_manifest(&dir, &used, "eval", Some(hash))?;
    Ok(Outcome { dir, summary })
}

fn known_features(s: &Settings, stats: &NormStats) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for (name, v) in &s.condition {
        if !stats.feature_names.contains(name) {
            return Err(Error::Config(format!(
                "condition names unknown feature '{}' (features: {})",
                name,
                stats.feature_names.join(", ")
            )));
        }
        out.insert(name.clone(), *v);
    }
    Ok(out)
}

/// One encoded feature row; unobserved numeric features are drawn from
/// `N(0, 1)` and unobserved hours uniformly.
fn encode_row<R: Rng + ?Sized>(stats: &NormStats, known: &HashMap<String, f64>, rng: &mut R) -> Vec<f64> {
    let mut row = Vec::with_capacity(stats.encoded_dim());
    for (j, (name, kind)) in stats.feature_names.iter().zip(&stats.kinds).enumerate() {
        match (kind, known.get(name)) {
            (ColumnKind::CyclicHour, Some(&h)) => {
                let (a, b) = encode_hour(h);
                row.extend([a, b]);
            }
            (ColumnKind::CyclicHour, None) => {
                let (a, b) = encode_hour(24.0 * rng.random::<f64>());
                row.extend([a, b]);
            }
            (ColumnKind::Encoded, Some(&v)) => row.push(v),
            (_, Some(&v)) => row.push(stats.normalize_feature(j, v)),
            (_, None) => row.push(rng.sample(StandardNormal)),
        }
    }
    row
}

fn slots(stats: &NormStats, known: &HashMap<String, f64>) -> Vec<Slot> {
    let mut out = Vec::new();
    for (j, (name, kind)) in stats.feature_names.iter().zip(&stats.kinds).enumerate() {
        match (kind, known.get(name)) {
            (ColumnKind::CyclicHour, Some(&h)) => {
                let (a, b) = encode_hour(h);
                out.extend([Slot::Known(a), Slot::Known(b)]);
            }
            (ColumnKind::CyclicHour, None) => out.extend([Slot::HourSin, Slot::HourCos]),
            (ColumnKind::Encoded, Some(&v)) => out.push(Slot::Known(v)),
            (_, Some(&v)) => out.push(Slot::Known(stats.normalize_feature(j, v))),
            (_, None) => out.push(Slot::Missing),
        }
    }
    out
}

fn all_known(stats: &NormStats, known: &HashMap<String, f64>) -> bool {
    stats.feature_names.iter().all(|n| known.contains_key(n))
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let ck = load_checkpoint(&s)?;
    let known = known_features(&s, &ck.stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    let n = s.sample_n;
    let x = Array2::from_shape_vec(
        (n, ck.stats.encoded_dim()),
        (0..n).flat_map(|_| encode_row(&ck.stats, &known, &mut rng)).collect(),
    )
    .expect("shape");
    let draw = |m: &ConditionalModel, x: &Array2<f64>, rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        let params = draw_head_params(m, x.view(), 1, rng)?;
        params.iter().map(|p| m.head.sample(p[0].view(), &m.globals, rng)).collect()
    };
    let columns: Vec<Vec<f64>> = match &ck.model {
        Model::Conditional(m) => vec![draw(m, &x, &mut rng)?],
        Model::Autoreg(m) => {
            let y1 = draw(&m.first, &x, &mut rng)?;
            let mut x2 = Array2::zeros((n, x.ncols() + 1));
            x2.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
            x2.column_mut(x.ncols()).assign(&Array1::from(y1.clone()));
            let y2 = draw(&m.second, &x2, &mut rng)?;
            vec![y1, y2]
        }
    };
    let dir = out_dir(&s)?;
    let mut csv = ck.stats.target_names.join(",");
    csv.push('\n');
    for i in 0..n {
        let row: Vec<String> = columns
            .iter()
            .enumerate()
            .map(|(t, c)| format!("{:?}", ck.stats.denormalize_target(t, c[i])))
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_file(&dir.join("samples.csv"), &csv)?;
    write_manifest(&dir, cfg, "sample", None)?;
    Ok(Outcome {
        summary: format!("wrote {} samples", n),
        dir,
    })
}

fn auto_range(stats_mean: f64, stats_std: f64) -> AxisRange {
    AxisRange {
        lo: stats_mean - 3.0 * stats_std,
        hi: stats_mean + 3.0 * stats_std,
        points: 101,
    }
}

/// Quantile of a mixture CDF by bisection, expanding the bracket as needed.
fn mixture_quantile<F: Fn(f64) -> f64>(cdf: F, p: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..60 {
        if cdf(lo) <= p && cdf(hi) >= p {
            return bisect_increasing(&cdf, p, lo, hi, 1e-13);
        }
        lo *= 2.0;
        hi *= 2.0;
    }
    Err(Error::Solver(format!("could not bracket the {} quantile", p)))
}

pub fn cmd_heatmap(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let ck = load_checkpoint(&s)?;
    check_targets(&s, &ck)?;
    let known = known_features(&s, &ck.stats)?;
    let st = &ck.stats;
    let cap = |v: f64| s.cap.map_or(v, |c| v.min(c));
    let dir = out_dir(&s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    match &ck.model {
        Model::Conditional(m) => {
            let xf = match &s.x_feature {
                Some(n) => st
                    .feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::Config(format!("x_feature '{}' is not a feature", n)))?,
                None => 0,
            };
            if st.kinds.get(xf) != Some(&ColumnKind::Numeric) {
                return Err(Error::Config("heatmap x axis must be a numeric feature".into()));
            }
            let xr = s.x_range.unwrap_or_else(|| auto_range(st.feature_mean[xf], st.feature_std[xf]));
            let yr = s.y_range.unwrap_or_else(|| auto_range(st.target_mean[0], st.target_std[0]));
            let (xg, yg) = (xr.grid(), yr.grid());
            let mut known = known;
            let xname = st.feature_names[xf].clone();
            known.remove(&xname);
            let reps = if all_known(st, &{
                let mut k = known.clone();
                k.insert(xname.clone(), 0.0);
                k
            }) {
                1
            } else {
                s.marginal_samples
            };
            let mut rows = Vec::new();
            for &xv in &xg {
                known.insert(xname.clone(), xv);
                for _ in 0..reps {
                    rows.extend(encode_row(st, &known, &mut rng));
                }
            }
            let x = Array2::from_shape_vec((xg.len() * reps, st.encoded_dim()), rows).expect("shape");
            let params = draw_head_params(m, x.view(), s.train.mc_samples_test, &mut rng)?;
            let jac = st.log_jacobian().exp();
            let ys_norm: Vec<f64> = yg.iter().map(|&y| st.normalize_target(0, y)).collect();
            let columns: Vec<(Vec<f64>, [f64; 3])> = (0..xg.len())
                .into_par_iter()
                .map(|j| {
                    let blocks: Vec<&Array2<f64>> = params[j * reps..(j + 1) * reps].iter().flatten().collect();
                    let nb = blocks.len() as f64;
                    let dens = ys_norm
                        .iter()
                        .map(|&yn| {
                            let mut acc = 0.0;
                            for b in &blocks {
                                acc += m.head.log_density(b.view(), yn, &m.globals)?.exp();
                            }
                            Ok(acc / nb * jac)
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    let cdf = |yn: f64| {
                        blocks
                            .iter()
                            .map(|b| m.head.cdf(b.view(), yn, &m.globals).unwrap_or(f64::NAN))
                            .sum::<f64>()
                            / nb
                    };
                    let mut q = [0.0; 3];
                    for (k, p) in [0.5, 0.025, 0.975].into_iter().enumerate() {
                        q[k] = st.denormalize_target(0, mixture_quantile(cdf, p)?);
                    }
                    Ok((dens, q))
                })
                .collect::<Result<_>>()?;
            let mut csv = String::from("x,y,density\n");
            for (i, &yv) in yg.iter().enumerate() {
                for (j, &xv) in xg.iter().enumerate() {
                    let _ = writeln!(csv, "{:?},{:?},{:?}", xv, yv, cap(columns[j].0[i]));
                }
            }
            write_file(&dir.join("heatmap.csv"), &csv)?;
            let mut q = String::from("x,median,lo95,hi95\n");
            for (j, &xv) in xg.iter().enumerate() {
                let [med, lo, hi] = columns[j].1;
                let _ = writeln!(q, "{:?},{:?},{:?},{:?}", xv, med, lo, hi);
            }
            write_file(&dir.join("quantiles.csv"), &q)?;
        }
        Model::Autoreg(m) => {
            let xr = s.x_range.unwrap_or_else(|| auto_range(st.target_mean[0], st.target_std[0]));
            let yr = s.y_range.unwrap_or_else(|| auto_range(st.target_mean[1], st.target_std[1]));
            let (g1, g2) = (xr.grid(), yr.grid());
            let n1: Vec<f64> = g1.iter().map(|&v| st.normalize_target(0, v)).collect();
            let n2: Vec<f64> = g2.iter().map(|&v| st.normalize_target(1, v)).collect();
            let reps = if all_known(st, &known) { 1 } else { s.marginal_samples };
            let grid = density_grid(m, &slots(st, &known), &n1, &n2, reps, s.train.mc_samples_test, rng.random())?;
            let jac = st.log_jacobian().exp();
            let mut csv = format!("{},{},density\n", m.order[0], m.order[1]);
            for (i, &b) in g2.iter().enumerate() {
                for (j, &a) in g1.iter().enumerate() {
                    let _ = writeln!(csv, "{:?},{:?},{:?}", a, b, cap(grid[[i, j]] * jac));
                }
            }
            write_file(&dir.join("heatmap.csv"), &csv)?;
        }
    }
    write_manifest(&dir, cfg, "heatmap", None)?;
    Ok(Outcome {
        summary: format!("wrote {}", dir.join("heatmap.csv").display()),
        dir,
    })
}

pub fn cmd_prior_sample(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let xr = s.prior_x_range.ok_or_else(|| Error::Config("prior_x_range cannot be auto".into()))?;
    let yr = s.prior_y_range.ok_or_else(|| Error::Config("prior_y_range cannot be auto".into()))?;
    let (xg, yg) = (xr.grid(), yr.grid());
    let dir = out_dir(&s)?;
    let mut index = String::from("seed,lambda,sigma_beta,file\n");
    let mut count = 0;
    for &seed in &s.prior_seeds {
        for &lambda in &s.prior_lambdas {
            for &sb in &s.prior_sigma_betas {
                let mut prior = s.prior.clone();
                prior.lambda = lambda;
                prior.beta_hat.std = sb;
                let panel = sample_prior_cde(s.k, &s.hidden, &prior, seed, &xg, &yg)?;
                let name = format!("prior_seed{}_lambda{}_sbeta{}.csv", seed, lambda, sb);
                let mut csv = String::from("x,y,density\n");
                for (i, &yv) in yg.iter().enumerate() {
                    for (j, &xv) in xg.iter().enumerate() {
                        let _ = writeln!(csv, "{:?},{:?},{:?}", xv, yv, panel.density[[i, j]]);
                    }
                }
                write_file(&dir.join(&name), &csv)?;
                let _ = writeln!(index, "{},{:?},{:?},{}", seed, lambda, sb, name);
                count += 1;
            }
        }
    }
    write_file(&dir.join("panels.csv"), &index)?;
    write_manifest(&dir, cfg, "prior-sample", None)?;
    Ok(Outcome {
        summary: format!("wrote {} prior panels", count),
        dir,
    })
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub sigma_beta: f64,
    pub lambda: f64,
    pub sigma_w: f64,
    pub sigma_q: f64,
    pub valid_ll: f64,
    pub valid_sem: f64,
    pub test_ll: f64,
    pub dir: PathBuf,
}

pub fn cmd_grid_search(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let mut combos = Vec::new();
    for &sb in &s.grid_sigma_beta {
        for &l in &s.grid_lambda {
            for &sw in &s.grid_sigma_w {
                for &sq in &s.grid_sigma_q {
                    combos.push((sb, l, sw, sq));
                }
            }
        }
    }
    if combos.is_empty() {
        return Err(Error::Config("grid search needs at least one value per grid_* key".into()));
    }
    let dir = out_dir(&s)?;
    let results: Vec<GridResult> = combos
        .par_iter()
        .enumerate()
        .map(|(i, &(sb, l, sw, sq))| {
            let sub = dir.join(format!("combo_{:03}", i));
            let mut c = cfg.clone();
            c.insert("sigma_beta", format!("{:?}", sb));
            c.insert("lambda", format!("{:?}", l));
            c.insert("sigma_w", format!("{:?}", sw));
            c.insert("sigma_q", format!("{:?}", sq));
            c.insert("out", sub.to_string_lossy().into_owned());
            let trained = cmd_train(&c)?;
            let ck = Checkpoint::load(&trained.dir.join("checkpoint.json"))?;
            let ds = load_csv(Path::new(&ck.data), &ck.schema)?;
            let score = |rows: &[usize]| -> Result<(f64, f64)> {
                if rows.is_empty() {
                    return Ok((f64::NAN, f64::NAN));
                }
                let norm = ck.stats.apply(&ds.subset(rows))?;
                let mut lp = model_log_density(&ck.model, &norm, s.train.mc_samples_test, s.train.seed)?;
                if s.raw_units {
                    let j = ck.stats.log_jacobian();
                    lp.iter_mut().for_each(|v| *v += j);
                }
                Ok(mean_and_sem(&lp))
            };
            let (valid_ll, valid_sem) = score(&ck.split.valid)?;
            let (test_ll, _) = score(&ck.split.test)?;
            if valid_ll.is_nan() {
                return Err(Error::Data("grid search needs a non-empty validation split".into()));
            }
            Ok(GridResult {
                sigma_beta: sb,
                lambda: l,
                sigma_w: sw,
                sigma_q: sq,
                valid_ll,
                valid_sem,
                test_ll,
                dir: trained.dir,
            })
        })
        .collect::<Result<_>>()?;
    let mut ranked = results;
    ranked.sort_by(|a, b| b.valid_ll.total_cmp(&a.valid_ll));
    let mut csv = String::from("rank,sigma_beta,lambda,sigma_w,sigma_q,valid_ll,valid_sem,test_ll,dir\n");
    for (r, g) in ranked.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            r + 1,
            g.sigma_beta,
            g.lambda,
            g.sigma_w,
            g.sigma_q,
            g.valid_ll,
            g.valid_sem,
            g.test_ll,
            g.dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
        );
    }
    write_file(&dir.join("results.csv"), &csv)?;
    let best = &ranked[0];
    fs::copy(best.dir.join("manifest.txt"), dir.join("best_manifest.txt"))
        .map_err(|e| Error::io(dir.join("best_manifest.txt"), e))?;
    let hash = file_sha256(Path::new(&s.data))?;
    write_manifest(&dir, cfg, "grid-search", Some(hash))?;
    Ok(Outcome {
        summary: format!(
            "best of {}: sigma_beta={} lambda={} sigma_w={} sigma_q={} valid_ll={:.6} test_ll={:.6}",
            ranked.len(),
            best.sigma_beta,
            best.lambda,
            best.sigma_w,
            best.sigma_q,
            best.valid_ll,
            best.test_ll
        ),
        dir,
    })
}

pub fn cmd_gen_toy(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.typed()?;
    let gen = ToyGenerator::parse(&s.generator)?;
    if s.n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let toy = toy_generator(gen, s.n, s.train.seed)?;
    let dir = out_dir(&s)?;
    toy.data.save_csv(&dir.join("data.csv"))?;
    let mut truth = String::from("log_density\n");
    for v in &toy.log_density {
        let _ = writeln!(truth, "{:?}", v);
    }
    write_file(&dir.join("truth.csv"), &truth)?;
    write_manifest(&dir, cfg, "gen-toy", None)?;
    let (mean, sem) = mean_and_sem(&toy.log_density);
    Ok(Outcome {
        summary: format!("wrote {} rows of {}; true mean ll {:.6} +- {:.6}", s.n, gen.name(), mean, sem),
        dir,
    })
}
