use std::path::Path;
use std::time::Instant;

use nanoflow_core::collocation::{
    build_collocation_set_with, is_stratified, latin_hypercube, CollocationCounts,
};
use nanoflow_core::nn::gradient_check;
use nanoflow_core::oracle::{mass_balance, sample_dataset, solve_forward, Dataset, SolveOutput};
use nanoflow_core::physics::{Kinetics, PhysicsLoss};
use nanoflow_core::vi::{
    inverse_posterior_summary, kl_gaussian_diag, posterior_predict, trace_csv, train_observed,
    Ensemble, InitOptions, MeanInit, Mode, TrainReport, VariationalState,
};
use nanoflow_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::manifest::{OutputDir, RunManifest};
use crate::Common;

const PREDICT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

fn load(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

struct Run<'a> {
    common: &'a Common,
    cfg: RunConfig,
    dir: OutputDir,
    started: Instant,
}

impl<'a> Run<'a> {
    fn start(common: &'a Common) -> Result<Self> {
        let started = Instant::now();
        let cfg = load(common)?;
        let dir = OutputDir::create(&common.out_dir)?;
        Ok(Self {
            common,
            cfg,
            dir,
            started,
        })
    }

    fn finish(self, subcommand: &str, mode: &str, metrics: Value) -> Result<()> {
        let files = self.dir.files().to_vec();
        let manifest = RunManifest {
            tool: "nanoflow",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            mode,
            preset: if self.cfg.training.noise.is_some() {
                "custom"
            } else {
                self.cfg.training.noise_preset.name()
            },
            seed: self.common.seed,
            config: &self.cfg,
            metrics,
            files: &files,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.dir.finish(&manifest)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

pub fn solve(common: &Common) -> Result<u8> {
    let mut run = Run::start(common)?;
    let out = solve_forward(&run.cfg.column, None)?;
    run.dir.write("breakthrough.csv", out.breakthrough_csv().as_bytes())?;
    run.dir.write("retention.csv", out.retention_csv().as_bytes())?;
    let audit = out.mass_audit;
    eprintln!(
        "mass audit: injected {:.6e}, relative closure error {:.3e}",
        audit.injected, audit.relative_closure_error
    );
    run.finish(
        "solve",
        "oracle",
        json!({ "mass_audit": audit, "time_step_s": out.time_step }),
    )?;
    Ok(0)
}

pub fn synth(common: &Common) -> Result<u8> {
    let mut run = Run::start(common)?;
    let reference = run.cfg.reference_column();
    let out = solve_forward(&reference, None)?;
    let s = run.cfg.synthesis;
    let ds = sample_dataset(&out, &reference, s.noise_std, s.n_btc, s.n_ret, common.seed)?;
    run.dir.write("dataset.csv", ds.to_csv().as_bytes())?;
    let n = ds.len() as f64;
    let noise_rms = (ds.rows.iter().map(|o| (o.value - o.truth).powi(2)).sum::<f64>() / n).sqrt();
    run.finish(
        "synth",
        "oracle",
        json!({ "rows": ds.len(), "noise_rms": noise_rms }),
    )?;
    Ok(0)
}

/// Agreement of a predictive ensemble with the reference solution.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Scores {
    pub btc_rmse: f64,
    pub btc_max_abs_error: f64,
    pub btc_coverage_pct: f64,
    pub retention_rmse: f64,
    pub retention_coverage_pct: f64,
}

pub fn score(ens: &Ensemble, reference: &SolveOutput) -> Scores {
    fn stats(at: &[f64], s: &nanoflow_core::vi::Summary, truth: impl Fn(f64) -> f64) -> (f64, f64, f64) {
        let mut sq = 0.0;
        let mut worst: f64 = 0.0;
        let mut inside = 0usize;
        for (j, &x) in at.iter().enumerate() {
            let y = truth(x);
            let e = s.mean[j] - y;
            sq += e * e;
            worst = worst.max(e.abs());
            if s.min[j] <= y && y <= s.max[j] {
                inside += 1;
            }
        }
        let n = at.len() as f64;
        ((sq / n).sqrt(), worst, 100.0 * inside as f64 / n)
    }
    let (btc_rmse, btc_max_abs_error, btc_coverage_pct) =
        stats(&ens.times, &ens.btc_summary, |t| reference.outlet_at(t));
    let (retention_rmse, _, retention_coverage_pct) =
        stats(&ens.positions, &ens.retention_summary, |x| reference.retained_at(x));
    Scores {
        btc_rmse,
        btc_max_abs_error,
        btc_coverage_pct,
        retention_rmse,
        retention_coverage_pct,
    }
}

fn progress(iterations: usize) -> impl FnMut(&nanoflow_core::vi::TraceRow) {
    let every = (iterations / 20).max(1);
    let started = Instant::now();
    move |row| {
        if row.iter % every == 0 || row.iter == iterations {
            eprintln!(
                "iter {:>6}/{iterations}  elbo {:.6e}  nll {:.6e}  kl {:.4e}  {:.0}s",
                row.iter,
                row.elbo,
                row.loss.total_nll,
                row.kl,
                started.elapsed().as_secs_f64()
            );
        }
    }
}

fn train_run(run: &Run<'_>, mode: Mode) -> Result<TrainReport> {
    let cfg = &run.cfg;
    let colloc = build_collocation_set_with(&cfg.collocation, run.common.seed)?;
    train_observed(
        &cfg.column,
        cfg.spec(),
        colloc,
        mode,
        &cfg.training,
        run.common.seed,
        progress(cfg.training.iterations),
    )
}

/// Ensemble CSVs plus scores against the reference solution.
fn write_predictions(run: &mut Run<'_>, state: &VariationalState) -> Result<Scores> {
    let cfg = &run.cfg;
    let ens = posterior_predict(
        state,
        &cfg.column,
        cfg.prediction.samples,
        &cfg.output_times(),
        &cfg.output_positions(),
        run.common.seed ^ PREDICT_STREAM,
    )?;
    let reference = solve_forward(&cfg.reference_column(), None)?;
    let scores = score(&ens, &reference);
    run.dir.write("ensemble_btc.csv", ens.btc_csv().as_bytes())?;
    run.dir.write("ensemble_retention.csv", ens.retention_csv().as_bytes())?;
    eprintln!(
        "breakthrough vs reference: rmse {:.4e}, envelope coverage {:.1}%",
        scores.btc_rmse, scores.btc_coverage_pct
    );
    Ok(scores)
}

fn write_posterior(run: &mut Run<'_>, state: &VariationalState) -> Result<Value> {
    let k = inverse_posterior_summary(state, run.cfg.prediction.samples, run.common.seed ^ PREDICT_STREAM)?;
    run.dir.write_json("posterior.json", &k)?;
    eprintln!(
        "k_a = {:.4e} ± {:.2e} 1/s, k_d = {:.4e} ± {:.2e} 1/s",
        k.ka_mean, k.ka_std, k.kd_mean, k.kd_std
    );
    Ok(serde_json::to_value(k).expect("plain struct"))
}

pub fn train_forward(common: &Common) -> Result<u8> {
    let mut run = Run::start(common)?;
    let report = train_run(&run, Mode::Forward)?;
    run.dir.write("checkpoint.bin", &report.state.to_bytes())?;
    run.dir.write("trace.csv", trace_csv(&report.trace).as_bytes())?;
    let scores = write_predictions(&mut run, &report.state)?;
    let last = report.trace.last().expect("at least one iteration");
    run.finish(
        "train-forward",
        "forward",
        json!({
            "scores": scores,
            "final_elbo": last.elbo,
            "final_total_nll": last.loss.total_nll,
            "training_wall_clock_s": report.wall_clock_s,
        }),
    )?;
    Ok(0)
}

pub fn invert(common: &Common, dataset: &Path) -> Result<u8> {
    let mut run = Run::start(common)?;
    let text = std::fs::read_to_string(dataset).map_err(|e| Error::io(dataset, e))?;
    let ds = Dataset::from_csv(&text)?;
    let report = train_run(&run, Mode::Inverse(ds))?;
    run.dir.write("checkpoint.bin", &report.state.to_bytes())?;
    run.dir.write("trace.csv", trace_csv(&report.trace).as_bytes())?;
    let posterior = write_posterior(&mut run, &report.state)?;
    let scores = write_predictions(&mut run, &report.state)?;
    let last = report.trace.last().expect("at least one iteration");
    run.finish(
        "invert",
        "inverse",
        json!({
            "posterior": posterior,
            "scores": scores,
            "final_elbo": last.elbo,
            "final_total_nll": last.loss.total_nll,
            "training_wall_clock_s": report.wall_clock_s,
        }),
    )?;
    Ok(0)
}

pub fn predict(common: &Common, checkpoint: &Path) -> Result<u8> {
    let mut run = Run::start(common)?;
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let state = VariationalState::from_bytes(&bytes)?;
    let mode = if state.is_inverse() { "inverse" } else { "forward" };
    let posterior = if state.is_inverse() {
        Some(write_posterior(&mut run, &state)?)
    } else {
        None
    };
    let scores = write_predictions(&mut run, &state)?;
    run.finish(
        "predict",
        mode,
        json!({ "scores": scores, "posterior": posterior }),
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct CheckItem {
    name: &'static str,
    passed: bool,
    value: f64,
    threshold: f64,
    detail: String,
}

/// Point budget of the gradient self-test.
const CHECK_COUNTS: CollocationCounts = CollocationCounts {
    interior: 1000,
    inlet: 200,
    outlet: 200,
    initial: 200,
};

fn check_gradient(cfg: &RunConfig, seed: u64) -> Result<CheckItem> {
    let spec = cfg.spec();
    let colloc = build_collocation_set_with(&CHECK_COUNTS, seed)?;
    let loss = PhysicsLoss::new(
        &cfg.column,
        spec,
        colloc,
        cfg.training.noise_scales(),
        None,
    )?;
    let init = InitOptions {
        scheme: MeanInit::Xavier,
        ..Default::default()
    };
    let state = VariationalState::init(spec, &init, &cfg.training.prior, false, seed)?;
    let p = spec.param_count();
    let params = &state.mu[..2 * p];
    let kin = Kinetics::from_config(&cfg.column);
    let eval = loss.evaluate(&params[..p], &params[p..], kin, None, true)?;
    let mut grad = eval.grad_c;
    grad.extend_from_slice(&eval.grad_s);
    let value = |w: &[f64]| {
        loss.total_nll(&w[..p], &w[p..], kin)
            .unwrap_or(f64::NAN)
    };
    let probes = 24;
    let r = gradient_check(params, value, &grad, probes, 1e-3, seed)?;
    Ok(CheckItem {
        name: "loss_gradient",
        passed: r.max_rel_error < 1e-5,
        value: r.max_rel_error,
        threshold: 1e-5,
        detail: format!(
            "worst of {probes} probes at parameter {} (analytic {:.6e}, finite difference {:.6e})",
            r.worst_coordinate, r.analytic, r.finite_difference
        ),
    })
}

fn check_kl() -> Result<CheckItem> {
    let cases = [
        (kl_gaussian_diag(&[0.0; 3], &[1.0; 3], 0.0, 1.0)?, 0.0),
        (kl_gaussian_diag(&[1.0], &[1.0], 0.0, 1.0)?, 0.5),
        (
            kl_gaussian_diag(&[0.0], &[0.5], 0.0, 1.0)?,
            0.5 * (0.25 - 1.0 - 0.25f64.ln()),
        ),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(CheckItem {
        name: "kl_identities",
        passed: worst <= 1e-12,
        value: worst,
        threshold: 1e-12,
        detail: "N(0,1)||N(0,1), N(1,1)||N(0,1), N(0,0.25)||N(0,1)".into(),
    })
}

fn check_lhs(cfg: &RunConfig, seed: u64) -> Result<CheckItem> {
    let n = cfg.collocation.interior;
    let ok = is_stratified(&latin_hypercube(n, 2, seed)?);
    Ok(CheckItem {
        name: "lhs_stratification",
        passed: ok,
        value: if ok { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: format!("{n} points, one per stratum on both axes"),
    })
}

fn check_mass(cfg: &RunConfig) -> Result<CheckItem> {
    let short = nanoflow_core::ColumnConfig {
        horizon: cfg.column.horizon.min(3000.0),
        ..cfg.column
    };
    let out = solve_forward(&short, None)?;
    let audit = mass_balance(&out, &short)?;
    Ok(CheckItem {
        name: "mass_balance",
        passed: audit.relative_closure_error < 1e-3,
        value: audit.relative_closure_error,
        threshold: 1e-3,
        detail: format!("solve to t = {} s", short.horizon),
    })
}

pub fn check(common: &Common) -> Result<u8> {
    let mut run = Run::start(common)?;
    let seed = common.seed;
    let items = vec![
        check_gradient(&run.cfg, seed)?,
        check_kl()?,
        check_lhs(&run.cfg, seed)?,
        check_mass(&run.cfg)?,
    ];
    for it in &items {
        println!(
            "{} {:<20} {:.3e} (threshold {:.0e}) {}",
            if it.passed { "PASS" } else { "FAIL" },
            it.name,
            it.value,
            it.threshold,
            it.detail
        );
    }
    let all = items.iter().all(|i| i.passed);
    run.dir.write_json("check_report.json", &items)?;
    run.finish("check", "self-test", json!({ "all_passed": all, "checks": items }))?;
    Ok(if all { 0 } else { 3 })
}
