//! Acceptance checks. Run with `cargo test --test acceptance`; pass
//! criterion numbers (e.g. `-- 6 8`) to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use bnflow::autoreg::{density_grid, grid_mass, top_decile_coverage, Slot};
use bnflow::bnn::{BayesianMlp, MlpArchitecture, OutputGroup, PriorConfig, VarianceMode};
use bnflow::checkpoint::{Checkpoint, Model};
use bnflow::cli;
use bnflow::config::RunConfig;
use bnflow::data::{bimodal_log_density, load_csv, read_indices, toy_generator, ColumnKind, ToyGenerator};
use bnflow::flow::{FlowStack, RadialStage, DEFAULT_INVERT_TOL};
use bnflow::heads::Head;
use bnflow::inference::{draw_batch_noise, free_energy_with_noise, ConditionalModel};
use bnflow::numeric::{ks_statistic, linspace, mean_and_sem, normal_log_pdf, std_normal_cdf, TabulatedCdf};
use bnflow::prior::{output_spread, prior_network, sample_prior_cde};
use bnflow::tape::relative_error;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_stack<R: Rng>(k: usize, rng: &mut R) -> FlowStack {
    let flat: Vec<f64> = (0..FlowStack::param_count(k)).map(|_| rng.sample(StandardNormal)).collect();
    FlowStack::unpack(&flat, k).unwrap()
}

fn config(pairs: &[String]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(pairs).unwrap();
    cfg
}

fn pairs(items: &[(&str, String)]) -> Vec<String> {
    items.iter().map(|(k, v)| format!("{}={}", k, v)).collect()
}

fn mean_ll(summary_dir: &Path) -> f64 {
    let text = fs::read_to_string(summary_dir.join("summary.txt")).unwrap();
    text.split_whitespace().nth(2).unwrap().parse().unwrap()
}

fn c1_normalisation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ks = [1, 2, 5, 10];
    let stacks: Vec<FlowStack> = (0..200).map(|i| random_stack(ks[i % 4], &mut rng)).collect();
    let worst = stacks
        .par_iter()
        .map(|s| (s.quadrature_mass(-30.0, 30.0, 200_001) - 1.0).abs())
        .reduce(|| 0.0, f64::max);
    verdict(worst <= 1e-3, format!("200 stacks, max |mass - 1| = {:.2e}", worst))
}

fn c2_gradients() -> Verdict {
    let x = Array2::from_shape_vec((3, 1), vec![0.3, -1.2, 0.8]).unwrap();
    let y = ndarray::array![0.5, -0.8, 1.3];
    let mut worst: f64 = 0.0;
    for head in [Head::Flow { k: 3 }, Head::Mdn { c: 3 }, Head::LatentVariable { noise_dim: 1, samples: 4 }] {
        for mode in [VarianceMode::Learned, VarianceMode::Fixed { sigma: 0.1 }] {
            let mut m = ConditionalModel::new(1, vec![5], head, PriorConfig::default(), mode).unwrap();
            m.net.init_posterior(17, 0.3).unwrap();
            if mode == VarianceMode::Learned {
                m.net.set_all_variances(0.05);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let noise = draw_batch_noise(&m, 3, 2, &mut rng);
            let (_, grad) = free_energy_with_noise(&m, x.view(), y.view(), 3, &noise).unwrap();
            let p0 = m.flat_params();
            let mut mm = m.clone();
            let h = 1e-5;
            for i in 0..p0.len() {
                let mut p = p0.clone();
                p[i] += h;
                mm.set_flat_params(&p);
                let fp = free_energy_with_noise(&mm, x.view(), y.view(), 3, &noise).unwrap().0.free_energy;
                p[i] -= 2.0 * h;
                mm.set_flat_params(&p);
                let fm = free_energy_with_noise(&mm, x.view(), y.view(), 3, &noise).unwrap().0.free_energy;
                worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * h)));
            }
        }
    }
    verdict(worst < 1e-5, format!("nf/mdn/lv x fixed/learned, max relative error {:.2e}", worst))
}

fn c3_max_distortion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let a: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let b: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let g: f64 = 5.0 * rng.sample::<f64, _>(StandardNormal);
        let st = RadialStage::new(a, b, g);
        worst = worst.max((st.log_grad(g) - b).abs());
    }
    verdict(worst <= 1e-12, format!("1e5 stages, max |ln f'(gamma) - beta_hat| = {:.2e}", worst))
}

fn c4_sampling() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ks = [1, 2, 5, 10];
    let stacks: Vec<(FlowStack, u64)> = (0..20).map(|i| (random_stack(ks[i % 4], &mut rng), i as u64)).collect();
    let worst = stacks
        .par_iter()
        .map(|(s, seed)| {
            let grid = linspace(-30.0, 30.0, 600_001);
            let dens: Vec<f64> = grid.iter().map(|&y| s.log_density(y).unwrap().exp()).collect();
            let cdf = TabulatedCdf::from_density(grid, &dens);
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let draws: Vec<f64> = (0..10_000).map(|_| s.sample(&mut r, DEFAULT_INVERT_TOL).unwrap()).collect();
            ks_statistic(&draws, |y| cdf.eval(y))
        })
        .reduce(|| 0.0, f64::max);
    verdict(worst < 0.02, format!("20 stacks x 1e4 draws, max KS = {:.4}", worst))
}

fn c5_kl() -> Verdict {
    let results: Vec<(f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let arch = MlpArchitecture::new(2, vec![4], 4);
            let prior = PriorConfig {
                sigma_w: 0.7,
                lambda: 1.0,
                ..PriorConfig::default()
            };
            let mut net = BayesianMlp::new(arch, OutputGroup::flow_layout(1), prior, VarianceMode::Learned).unwrap();
            net.init_posterior(i, 0.2 + 0.05 * i as f64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
            for p in net.params_mut().iter_mut() {
                *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            let analytic = net.kl_to_prior();
            let terms: Vec<(f64, f64, f64, f64, f64)> = net
                .prior_moments()
                .into_iter()
                .zip(net.posterior_variances())
                .map(|((m, p), v)| (net.params()[m], v.sqrt(), p.mean, p.std, 0.0))
                .collect();
            let n = 1_000_000;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..n {
                let mut d = 0.0;
                for &(m, s, pm, ps, _) in &terms {
                    let t = m + s * rng.sample::<f64, _>(StandardNormal);
                    d += normal_log_pdf(t, m, s) - normal_log_pdf(t, pm, ps);
                }
                sum += d;
                sq += d * d;
            }
            let mean = sum / n as f64;
            let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
            (analytic, mean, se)
        })
        .collect();
    let worst_z = results.iter().map(|(a, m, se)| (a - m).abs() / se).fold(0.0, f64::max);

    let arch = MlpArchitecture::new(2, vec![4], 4);
    let mut net = BayesianMlp::new(arch, OutputGroup::flow_layout(1), PriorConfig::default(), VarianceMode::Learned).unwrap();
    let moments = net.prior_moments();
    for (m, p) in &moments {
        net.params_mut()[*m] = p.mean;
    }
    net.set_all_variances(1.0);
    let at_prior = net.kl_to_prior();
    verdict(
        worst_z <= 3.0 && at_prior == 0.0,
        format!("20 networks, max |analytic - MC| = {:.2} SE; KL(p||p) = {}", worst_z, at_prior),
    )
}

fn c6_heteroscedastic(root: &Path) -> Verdict {
    let toy = toy_generator(ToyGenerator::HeteroscedasticBimodal, 6000, 7).unwrap();
    let data = root.join("bimodal.csv");
    toy.data.save_csv(&data).unwrap();
    let common = |head: &str| {
        pairs(&[
            ("data", data.display().to_string()),
            ("split", "0.8333333333333334,0.0,0.16666666666666666".into()),
            ("head", head.into()),
            ("k", "5".into()),
            ("iterations", "3000".into()),
            ("batch_size", "500".into()),
            ("mc_train", "3".into()),
            ("mc_test", "20".into()),
            ("out", root.join(format!("train_{}", head)).display().to_string()),
        ])
    };
    let mut scores = Vec::new();
    for head in ["nf", "gauss"] {
        let tr = cli::run("train", &config(&common(head))).unwrap();
        let mut ev = common(head);
        ev.push(format!("checkpoint={}", tr.dir.join("checkpoint.json").display()));
        ev.push(format!("out={}", root.join(format!("eval_{}", head)).display()));
        let out = cli::run("eval", &config(&ev)).unwrap();
        scores.push(mean_ll(&out.dir));
    }
    let test = read_indices(&root.join("train_nf").join("test.idx")).unwrap();
    assert_eq!(test.len(), 1000);
    let oracle: Vec<f64> = test
        .iter()
        .map(|&i| bimodal_log_density(toy.data.features[[i, 0]], toy.data.targets[[i, 0]]))
        .collect();
    let (oracle, _) = mean_and_sem(&oracle);
    let (nf, gauss) = (scores[0], scores[1]);
    verdict(
        nf - gauss >= 0.1 && oracle - nf <= 0.3,
        format!("test LL nf-5 {:.4}, gaussian {:.4}, true density {:.4}", nf, gauss, oracle),
    )
}

fn c7_diabetes(root: &Path) -> Verdict {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("diabetes.csv");
    let out = root.join("diabetes");
    let cfg = config(&pairs(&[
        ("data", data.display().to_string()),
        ("targets", "target".into()),
        ("split", "0.8,0.1,0.1".into()),
        ("head", "nf".into()),
        ("k", "2".into()),
        ("hidden", "10".into()),
        ("iterations", "300".into()),
        ("mc_train", "5".into()),
        ("mc_test", "20".into()),
        ("grid_sigma_beta", "0.5,1".into()),
        ("grid_lambda", "0.5,1".into()),
        ("grid_sigma_w", "0.3,1".into()),
        ("out", out.display().to_string()),
    ]));
    cli::run("grid-search", &cfg).unwrap();
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let best: Vec<&str> = results.lines().nth(1).unwrap().split(',').collect();
    let model_ll: f64 = best[7].parse().unwrap();

    let ck = Checkpoint::load(&out.join(best[8]).join("checkpoint.json")).unwrap();
    let ds = load_csv(&data, &ck.schema).unwrap();
    let fit: Vec<f64> = ck.split.train.iter().chain(&ck.split.valid).map(|&i| ds.targets[[i, 0]]).collect();
    let mu = fit.iter().sum::<f64>() / fit.len() as f64;
    let sd = (fit.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / fit.len() as f64).sqrt();
    let base: Vec<f64> = ck.split.test.iter().map(|&i| normal_log_pdf(ds.targets[[i, 0]], mu, sd)).collect();
    let (base, _) = mean_and_sem(&base);
    verdict(
        model_ll > base,
        format!("8-point grid, best nf-2 test LL {:.4} vs unconditional gaussian {:.4}", model_ll, base),
    )
}

fn c8_spatial(root: &Path) -> Verdict {
    let toy = toy_generator(ToyGenerator::SpatialTwoCluster, 20_000, 3).unwrap();
    let data = root.join("spatial.csv");
    toy.data.save_csv(&data).unwrap();
    let out = root.join("spatial");
    let cfg = config(&pairs(&[
        ("data", data.display().to_string()),
        ("targets", format!("{},{}", toy.data.target_names[0], toy.data.target_names[1])),
        ("cyclic", "hour".into()),
        ("split", "0.9,0.0,0.1".into()),
        ("k", "5".into()),
        ("iterations", "3000".into()),
        ("batch_size", "500".into()),
        ("mc_train", "3".into()),
        ("out", out.display().to_string()),
    ]));
    cli::run("train", &cfg).unwrap();
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let Model::Autoreg(model) = &ck.model else { panic!("expected a two-target model") };
    let train = ck.stats.apply(&toy.data.subset(&ck.split.train)).unwrap();
    let test = ck.stats.apply(&toy.data.subset(&ck.split.test)).unwrap();

    let g1 = linspace(-4.0, 4.0, 161);
    let g2 = linspace(-4.0, 4.0, 161);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 40;
    let mut grid = Array2::<f64>::zeros((g2.len(), g1.len()));
    for d in 0..draws {
        let row = rng.random_range(0..train.len());
        let cond: Vec<Slot> = train.features.row(row).iter().map(|&v| Slot::Known(v)).collect();
        grid += &density_grid(model, &cond, &g1, &g2, 1, 5, d).unwrap();
    }
    grid /= draws as f64;
    let mass = grid_mass(&grid, g1[1] - g1[0], g2[1] - g2[0]);
    let points: Vec<(f64, f64)> = test.targets.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let coverage = top_decile_coverage(&grid, &g1, &g2, &points);
    assert!(ck.stats.kinds.contains(&ColumnKind::CyclicHour));
    verdict(
        (mass - 1.0).abs() <= 2e-2 && coverage >= 0.8,
        format!("grid mass {:.4}, top-decile coverage {:.3} of {} held-out points", mass, coverage, points.len()),
    )
}

fn c9_prior() -> Verdict {
    let k = 3;
    let hidden = [50];
    let xg = linspace(-3.0, 3.0, 61);
    let yg = linspace(-40.0, 40.0, 16_001);
    let mut worst_ks: f64 = 0.0;
    let mut monotone = true;
    let xs = Array2::from_shape_vec((xg.len(), 1), xg.clone()).unwrap();
    for seed in 0..5u64 {
        let flat = PriorConfig {
            beta_hat: bnflow::bnn::GaussianPrior::new(0.0, 0.0),
            ..PriorConfig::default()
        };
        let panel = sample_prior_cde(k, &hidden, &flat, seed, &xg, &yg).unwrap();
        for j in 0..xg.len() {
            let col: Vec<f64> = panel.density.column(j).to_vec();
            let cdf = TabulatedCdf::from_density(yg.clone(), &col);
            let s = panel.params[[j, 3 * k]];
            let d = yg.iter().map(|&y| (cdf.eval(y) - std_normal_cdf(y - s)).abs()).fold(0.0, f64::max);
            worst_ks = worst_ks.max(d);
        }
        let spreads: Vec<Vec<f64>> = [0.25, 0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&l| {
                let prior = PriorConfig {
                    lambda: l,
                    ..PriorConfig::default()
                };
                let net = prior_network(k, &hidden, &prior, seed).unwrap();
                output_spread(&net.forward_mean(xs.view()).unwrap())
            })
            .collect();
        for w in spreads.windows(2) {
            monotone &= w[0].iter().zip(&w[1]).all(|(a, b)| b > a);
        }
    }
    verdict(
        worst_ks < 0.01 && monotone,
        format!("5 seeds, sigma_beta=0 max KS {:.2e}; spread strictly increasing in lambda: {}", worst_ks, monotone),
    )
}

fn bnflow(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_bnflow")).args(args).env_remove(cli::OUT_ENV).output().unwrap();
    assert!(out.status.success(), "bnflow {:?}: {}", args, String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn comparable(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let name = path.file_name().unwrap().to_string_lossy();
    if name.ends_with("manifest.txt") {
        let text = String::from_utf8(bytes).unwrap();
        text.lines()
            .filter(|l| !l.starts_with("out ") && !l.starts_with("out="))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes()
    } else {
        bytes
    }
}

fn same_artifacts(a: &Path, b: &Path) -> Result<usize, String> {
    let fa = files(a);
    let fb = files(b);
    let rel = |root: &Path, v: &[PathBuf]| v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    if rel(a, &fa) != rel(b, &fb) {
        return Err(format!("{} and {} hold different files", a.display(), b.display()));
    }
    for (x, y) in fa.iter().zip(&fb) {
        if comparable(x) != comparable(y) {
            return Err(format!("{} differs on rerun", x.display()));
        }
    }
    Ok(fa.len())
}

fn c10_determinism(root: &Path) -> Verdict {
    let d = |name: &str| root.join(name).display().to_string();
    let small = ["--set", "hidden=5", "--set", "iterations=40", "--set", "mc_train=2", "--set", "mc_test=3"];
    let mut runs: Vec<(&str, Vec<String>)> = vec![
        ("gen-toy", vec!["--set".into(), "n=300".into()]),
        ("gen-toy-2d", vec!["--set".into(), "n=300".into(), "--set".into(), "generator=spatial-two-cluster".into()]),
    ];
    let toy = format!("{}/data.csv", d("gen-toy"));
    let toy2 = format!("{}/data.csv", d("gen-toy-2d"));
    let ck = format!("{}/checkpoint.json", d("train"));
    let ck2 = format!("{}/checkpoint.json", d("train-2d"));
    let with_small = |mut v: Vec<String>| {
        v.extend(small.iter().map(|s| s.to_string()));
        v
    };
    let s = |items: &[&str]| items.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    runs.push(("train", with_small(s(&["--data", &toy]))));
    runs.push(("train-2d", with_small(s(&["--data", &toy2, "--set", "targets=long,lat", "--set", "cyclic=hour", "--K", "2"]))));
    runs.push(("eval", with_small(s(&["--checkpoint", &ck]))));
    runs.push(("eval-2d", with_small(s(&["--checkpoint", &ck2]))));
    runs.push(("sample", with_small(s(&["--checkpoint", &ck, "--set", "sample_n=50", "--set", "condition=x=0.5"]))));
    runs.push((
        "heatmap",
        with_small(s(&["--checkpoint", &ck, "--set", "x_range=-2:2:9", "--set", "y_range=-3:3:21", "--cap"])),
    ));
    runs.push((
        "heatmap-2d",
        with_small(s(&["--checkpoint", &ck2, "--set", "x_range=-2:2:9", "--set", "y_range=-2:2:9", "--set", "marginal_samples=3"])),
    ));
    runs.push((
        "prior-sample",
        s(&["--set", "prior_x_range=-2:2:5", "--set", "prior_y_range=-4:4:41", "--set", "prior_seeds=0,1", "--set", "prior_lambdas=0.5,1"]),
    ));
    runs.push(("grid-search", with_small(s(&["--data", &toy, "--set", "grid_lambda=0.5,1"]))));

    let mut checked = 0;
    for (name, args) in &runs {
        let command = name.trim_end_matches("-2d");
        let mut full: Vec<&str> = vec![command, "--out"];
        let dir = d(name);
        full.push(&dir);
        full.extend(args.iter().map(|a| a.as_str()));
        bnflow(&full);
    }
    for (name, _) in &runs {
        let first = root.join(name);
        let again = root.join(format!("{}-rerun", name));
        let manifest = first.join("manifest.txt").display().to_string();
        let set = format!("out={}", again.display());
        bnflow(&["rerun", &manifest, "--set", &set]);
        match same_artifacts(&first, &again) {
            Ok(n) => checked += n,
            Err(e) => return verdict(false, e),
        }
    }
    verdict(true, format!("{} commands rerun from manifests, {} artifacts identical", runs.len(), checked))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let checks: Vec<(u32, Box<dyn Fn() -> Verdict + '_>)> = vec![
        (1, Box::new(c1_normalisation)),
        (2, Box::new(c2_gradients)),
        (3, Box::new(c3_max_distortion)),
        (4, Box::new(c4_sampling)),
        (5, Box::new(c5_kl)),
        (6, Box::new(|| c6_heteroscedastic(root))),
        (7, Box::new(|| c7_diabetes(root))),
        (8, Box::new(|| c8_spatial(root))),
        (9, Box::new(c9_prior)),
        (10, Box::new(|| c10_determinism(root))),
    ];
    let mut failed = Vec::new();
    for (n, check) in checks {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        println!(
            "criterion {}: {} {} ({:.1}s)",
            n,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {:?}", failed);
        std::process::exit(1);
    }
}
