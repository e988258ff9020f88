//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p koopman-is --test acceptance`. Pass criterion numbers as
//! arguments to run a subset, e.g. `-- 1 4 6`. The exit status reflects failures only with
//! `--strict`.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use koopman_is::config::ExperimentConfig;
use koopman_is::doob::DoobController;
use koopman_is::estimator::{analytic_oracles, run_ensemble, EnsembleSpec, ExactOuDoob};
use koopman_is::linalg::KahanSum;
use koopman_is::model::{make_builtin_model, EventObservable, Margin};
use koopman_is::paths::{derive_path_rng, TimeGrid, WeightRule};
use koopman_is::runner::{benchmark, build_points, build_spectrum, run_experiment, sweep_experiment, RunOptions, CONTROLLER_FILE};
use koopman_is::spde::{chain_oracle, SpectralSpde};

type Verdict = std::result::Result<(bool, String), String>;

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn opts(dir: &Path, name: &str) -> RunOptions {
    RunOptions { reuse_controller: false, out_dir: Some(dir.join(name)) }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(limit_secs: u64, elapsed: Duration) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn c1() -> Verdict {
    let t = Instant::now();
    let m = make_builtin_model("ou1d", &BTreeMap::new()).map_err(err)?;
    let b = benchmark("ou1d", 1).map_err(err)?;
    let rho = analytic_oracles(&m, &b.margin, &b.x0, b.horizon).map_err(err)?.value.rho;
    let el = t.elapsed();
    let ok = (rho - 1.5745e-2).abs() <= 5e-6 && within(1, el);
    Ok((ok, format!("rho = {rho:.6e} (target 1.5745e-2 to 4 digits), {:.3} s", el.as_secs_f64())))
}

fn c2(tmp: &Path) -> Verdict {
    let t = Instant::now();
    let o = run_experiment(&config("ou1d-table1"), &opts(tmp, "c2")).map_err(err)?;
    let el = t.elapsed();
    let r = &o.report;
    let z = (r.estimate - 1.5745e-2).abs() / r.std_error();
    let ok = z <= 3.0 && r.sample_variance <= 2e-3 && within(120, el);
    Ok((
        ok,
        format!(
            "estimate {:.5e} ({z:.2} s.e. from 1.5745e-2), variance {:.3e} (limit 2e-3), c = {}, {:.0} s",
            r.estimate,
            r.sample_variance,
            o.row.c.unwrap_or(f64::NAN),
            el.as_secs_f64()
        ),
    ))
}

fn c3(tmp: &Path) -> Verdict {
    const EXPECTED: [(f64, f64); 6] = [(1.0, 0.0432), (2.0, 0.0912), (4.0, 0.284), (6.0, 0.558), (8.0, 0.789), (16.0, 0.999)];
    let t = Instant::now();
    let cfg = config("ou1d-table2");
    let batch = cfg.doob.as_ref().map(|d| d.tuning_batch).unwrap_or(0) as f64;
    let (_, rows) = sweep_experiment(&cfg, &opts(tmp, "c3")).map_err(err)?;
    let el = t.elapsed();
    let var = |c: f64| rows.iter().find(|r| r.c == c).map(|r| r.variance).unwrap_or(f64::NAN);
    let mut ok = var(6.0) < var(1.0) && var(16.0) > 10.0 * var(6.0) && within(300, el);
    let mut parts = Vec::new();
    for (c, p) in EXPECTED {
        let row = rows.iter().find(|r| r.c == c).ok_or(format!("no sweep row for c = {c}"))?;
        let z = (row.proportion_in_event - p).abs() / (p * (1.0 - p) / batch).sqrt();
        ok &= z <= 3.0;
        parts.push(format!("c={c}: {:.4} ({z:.1} se) var {:.2e}", row.proportion_in_event, row.variance));
    }
    Ok((ok, format!("{}; c=6 is the offset calibration anchor; {:.0} s", parts.join(", "), el.as_secs_f64())))
}

fn zero_variance_relerr(rule: WeightRule, dt: f64) -> std::result::Result<f64, String> {
    let m = make_builtin_model("ou1d", &BTreeMap::new()).map_err(err)?;
    let obs = EventObservable::mollified(Margin::HalfSpace { coord: 0, threshold: 2.0 }, 3.0);
    let ctl = ExactOuDoob::new(&m, &obs, 1.0, 100).map_err(err)?;
    let x0 = [0.0];
    let spec = EnsembleSpec { weight_rule: rule, ..EnsembleSpec::new(&m, &obs, &x0, 1.0, dt, 4000, 404).map_err(err)? };
    Ok(run_ensemble(&spec, Some(&ctl)).map_err(err)?.report.relative_error)
}

fn c4() -> Verdict {
    let dts = [1e-3, 5e-4, 2.5e-4];
    let t = Instant::now();
    let mil = dts.iter().map(|dt| zero_variance_relerr(WeightRule::Milstein, *dt)).collect::<std::result::Result<Vec<_>, _>>()?;
    let el = t.elapsed();
    let ito = dts.iter().map(|dt| zero_variance_relerr(WeightRule::Ito, *dt)).collect::<std::result::Result<Vec<_>, _>>()?;
    let ok = mil[0] <= 0.05 && mil[0] / mil[2] >= 2.0 && within(60, el);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.3}%", 100.0 * x)).collect::<Vec<_>>().join(" / ");
    Ok((
        ok,
        format!(
            "relative std at dt 1e-3 / 5e-4 / 2.5e-4: Milstein weight {} (ratio {:.2}); Ito weight {} (ratio {:.2}); {:.0} s",
            fmt(&mil),
            mil[0] / mil[2],
            fmt(&ito),
            ito[0] / ito[2],
            el.as_secs_f64()
        ),
    ))
}

fn linear_benchmark(tmp: &Path, name: &str, model: &str) -> Verdict {
    let t = Instant::now();
    let cfg = config(name);
    let o = run_experiment(&cfg, &opts(tmp, name)).map_err(err)?;
    let el = t.elapsed();
    let m = make_builtin_model(model, &cfg.model.params).map_err(err)?;
    let rho = analytic_oracles(&m, &cfg.event.margin, &cfg.run.x0, cfg.run.horizon).map_err(err)?.value.rho;
    let r = &o.report;
    let z = (r.estimate - rho).abs() / r.std_error();
    let ok = z <= 4.0 && r.relative_error <= 20.0 && within(600, el);
    Ok((
        ok,
        format!(
            "{model}: estimate {:.4e} vs oracle {rho:.4e} ({z:.2} s.e.), relative error {:.2}, c = {}, {:.0} s",
            r.estimate,
            r.relative_error,
            o.row.c.unwrap_or(f64::NAN),
            el.as_secs_f64()
        ),
    ))
}

fn c5(tmp: &Path) -> Verdict {
    let a = linear_benchmark(tmp, "nonnormal", "nonnormal2d")?;
    let b = linear_benchmark(tmp, "brownian_osc", "brownian_osc")?;
    Ok((a.0 && b.0, format!("{}; {}", a.1, b.1)))
}

fn c6() -> Verdict {
    let t = Instant::now();
    let cfg = config("nonnormal");
    let m = make_builtin_model("nonnormal2d", &cfg.model.params).map_err(err)?;
    let pts = build_points(&cfg, &m).map_err(err)?;
    let sp = build_spectrum(&cfg, &m, &pts).map_err(err)?;
    let el = t.elapsed();
    let mut lam: Vec<f64> = sp.pairs.iter().map(|p| p.lambda.re).collect();
    lam.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let expect = [0.0, -0.3, -0.6, -1.0, -1.3, -2.0];
    let imag = sp.pairs.iter().map(|p| p.lambda.im.abs()).fold(0.0, f64::max);
    let lam_err = if lam.len() == expect.len() { lam.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(imag, f64::max) } else { f64::INFINITY };
    let idx = sp.basis.multi_indices();
    let lin = |e: usize| idx.iter().position(|m| m.iter().sum::<u32>() == 1 && m[e] == 1).unwrap();
    let (i0, i1) = (lin(0), lin(1));
    let align = |l: f64, target: [f64; 2]| -> f64 {
        let Some(p) = sp.pairs.iter().find(|p| (p.lambda.re - l).abs() < 1e-6) else { return f64::INFINITY };
        let (z0, z1) = (p.coeffs[i0], p.coeffs[i1]);
        let big = if z0.norm() >= z1.norm() { z0 } else { z1 };
        let phase = big.conj() / big.norm();
        let v = [(z0 * phase).re, (z1 * phase).re];
        let (n, tn) = ((v[0] * v[0] + v[1] * v[1]).sqrt(), (target[0] * target[0] + target[1] * target[1]).sqrt());
        let s = if v[0] * target[0] + v[1] * target[1] < 0.0 { -1.0 } else { 1.0 };
        (0..2).map(|k| (s * v[k] / n - target[k] / tn).abs()).fold(0.0, f64::max)
    };
    let (a1, a2) = (align(-0.3, [0.82, 0.57]), align(-1.0, [1.0, 0.0]));
    let ok = lam_err <= 1e-8 && a1 <= 1e-2 && a2 <= 1e-2 && within(10, el);
    Ok((
        ok,
        format!(
            "eigenvalues {:?} (max error {lam_err:.1e}), left-vector misalignment {a1:.1e} (lambda -0.3) and {a2:.1e} (lambda -1), {:.1} s",
            lam.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            el.as_secs_f64()
        ),
    ))
}

fn nonlinear(tmp: &Path, name: &str) -> Verdict {
    let t = Instant::now();
    let cfg = config(name);
    let m = make_builtin_model(name, &cfg.model.params).map_err(err)?;
    let pts = build_points(&cfg, &m).map_err(err)?;
    let sp = build_spectrum(&cfg, &m, &pts).map_err(err)?;
    let kept = sp.pairs.iter().filter(|p| p.validation_mse.is_some_and(|v| v < 0.04)).count();
    let o = match run_experiment(&cfg, &opts(tmp, name)) {
        Ok(o) => o,
        Err(e) => {
            let el = t.elapsed();
            let a = kept >= 6;
            return Ok((false, format!("{name}: (a) {kept} pairs below MSE 0.04 [{}]; (b)-(d) not reached: {e}; {:.0} s", mark(a), el.as_secs_f64())));
        }
    };
    let r1 = o.report.clone();
    let c1 = o.row.c.unwrap_or(1.0);
    let grid = cfg.doob.as_ref().map(|d| d.multipliers.clone()).unwrap_or_default();
    let pos = grid.iter().position(|c| *c == c1).unwrap_or(0);
    let c2 = if pos + 1 < grid.len() { grid[pos + 1] } else { grid[pos.saturating_sub(1)] };
    let text = std::fs::read_to_string(o.dir.join(CONTROLLER_FILE)).map_err(err)?;
    let ctl = DoobController::from_json(&text).map_err(err)?.with_multiplier(c2).map_err(err)?;
    let obs = EventObservable::indicator(cfg.event.margin.clone());
    let spec = EnsembleSpec::new(&m, &obs, &cfg.run.x0, cfg.run.horizon, cfg.run.dt, cfg.run.samples, cfg.run.seed + 1000).map_err(err)?;
    let prepared = ctl.prepare(&spec.grid).map_err(err)?;
    let r2 = run_ensemble(&spec, Some(&prepared)).map_err(err)?.report;
    let el = t.elapsed();
    let se = (r1.std_error().powi(2) + r2.std_error().powi(2)).sqrt();
    let z = (r1.estimate - r2.estimate).abs() / se;
    let (a, b, c, d) = (kept >= 6, r1.proportion_in_event >= 0.3, z <= 4.0, r1.relative_error <= 50.0);
    Ok((
        a && b && c && d && within(900, el),
        format!(
            "{name}: (a) {kept} pairs below MSE 0.04 [{}]; (b) hit fraction {:.3} at c = {c1} [{}]; (c) {:.3e} vs {:.3e} at c = {c2}, {z:.2} combined s.e. [{}]; (d) relative error {:.2} [{}]; {:.0} s",
            mark(a),
            r1.proportion_in_event,
            mark(b),
            r1.estimate,
            r2.estimate,
            mark(c),
            r1.relative_error,
            mark(d),
            el.as_secs_f64()
        ),
    ))
}

fn mark(v: bool) -> &'static str {
    if v {
        "ok"
    } else {
        "fail"
    }
}

fn c7(tmp: &Path) -> Verdict {
    let a = nonlinear(tmp, "vdp").unwrap_or_else(|e| (false, format!("vdp: error: {e}")));
    let b = nonlinear(tmp, "duffing").unwrap_or_else(|e| (false, format!("duffing: error: {e}")));
    Ok((a.0 && b.0, format!("{}; {}", a.1, b.1)))
}

/// Largest relative deviation of the ensemble mode variances at `t = 10` from `q / (2 lambda)`
/// for the chain without advection.
fn stationary_deviation(modes: usize, chains: usize) -> std::result::Result<f64, String> {
    let s = SpectralSpde::new(modes, 0.1, 0.0, 1.0).map_err(err)?;
    let st = s.stepper(0.05).map_err(err)?;
    let mut acc = vec![KahanSum::default(); modes];
    let (mut y, mut next, mut noise) = (vec![0.0; modes], vec![0.0; modes], vec![0.0; modes]);
    for i in 0..chains {
        let mut rng = derive_path_rng(88, i as u64);
        y.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..200 {
            st.qwiener_increment(&mut rng, &mut noise);
            st.step(&s, &y, None, &noise, &mut next);
            std::mem::swap(&mut y, &mut next);
        }
        for (a, v) in acc.iter_mut().zip(&y) {
            a.add(v * v);
        }
    }
    Ok(acc.iter().zip(s.stationary_variance()).map(|(a, v)| (a.value() / chains as f64 / v - 1.0).abs()).fold(0.0, f64::max))
}

fn c8(tmp: &Path) -> Verdict {
    let t = Instant::now();
    let cfg = config("advdiff");
    let modes = cfg.model.params.get("n_modes").copied().unwrap_or(32.0) as usize;
    let dev = stationary_deviation(modes, 100_000)?;
    let level = cfg.event.margin.level();
    let spde = SpectralSpde::new(modes, 0.1, 1.0, 1.0).map_err(err)?;
    let grid = TimeGrid::new(cfg.run.horizon, cfg.run.dt).map_err(err)?;
    let oracle = chain_oracle(&spde, level, &grid, 1_000_000, 0x0c8).map_err(err)?;
    let rho = oracle.rho;
    let o = run_experiment(&cfg, &opts(tmp, "c8")).map_err(err)?;
    let el = t.elapsed();
    let r = &o.report;
    let z = (r.estimate - rho).abs() / r.std_error();
    let mc_relerr = ((1.0 - rho) / rho).sqrt();
    let (a, b, c) = (dev <= 0.02, z <= 4.0, r.relative_error < mc_relerr);
    Ok((
        a && b && c && within(900, el),
        format!(
            "stationary variance deviation {:.2}% [{}]; estimate {:.4e} vs chain oracle {rho:.4e} ({z:.2} s.e.) [{}]; relative error {:.2} vs MC {mc_relerr:.2} [{}]; c = {}; {:.0} s",
            100.0 * dev,
            mark(a),
            r.estimate,
            mark(b),
            r.relative_error,
            mark(c),
            o.row.c.unwrap_or(f64::NAN),
            el.as_secs_f64()
        ),
    ))
}

fn c9() -> Verdict {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut checks = 0;
    for (k, f) in common::all_fixtures().iter().enumerate() {
        let seed = 9000 + k as u64;
        let mid: Vec<f64> = f.x0.iter().map(|v| v + 0.3).collect();
        let results = [
            common::girsanov_unbiased(f, 1.5, 4000, seed),
            common::positivization_invariance(f, 2.5, 0.4, &mid),
            common::regression_nesting(f),
            common::indicator_variance_identity(f, 500, seed),
            common::bound_dominates(f, 4000, seed),
            common::worker_determinism(f, 3, 200, seed),
        ];
        for r in results {
            checks += 1;
            if let Err(e) = r {
                failures.push(e);
            }
        }
    }
    let el = t.elapsed();
    let ok = failures.is_empty() && within(600, el);
    let detail = if failures.is_empty() { format!("{checks} checks over 6 models") } else { failures.join("; ") };
    Ok((ok, format!("{detail}, {:.0} s", el.as_secs_f64())))
}

fn main() -> ExitCode {
    let strict = std::env::args().any(|a| a == "--strict");
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir: PathBuf = tmp.path().to_path_buf();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "OU exact value", Box::new(c1)),
        (2, "OU importance sampling at p = 1", Box::new(|| c2(&dir))),
        (3, "OU multiplier sweep", Box::new(|| c3(&dir))),
        (4, "zero-variance identity", Box::new(c4)),
        (5, "linear benchmarks vs Gaussian oracles", Box::new(|| c5(&dir))),
        (6, "gEDMD exactness on nonnormal2d", Box::new(c6)),
        (7, "nonlinear benchmarks", Box::new(|| c7(&dir))),
        (8, "advection-diffusion SPDE", Box::new(|| c8(&dir))),
        (9, "property suites", Box::new(c9)),
    ];
    let mut all = true;
    for (n, name, f) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        all &= ok;
        println!("criterion {n} {}: {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if all || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
