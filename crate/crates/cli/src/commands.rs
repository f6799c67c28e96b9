//! One function per subcommand. Every command validates the hypotheses first
//! (only `diagnose` runs on a failing config), recomputes the estimates it depends on, and ends by writing `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use adaptqsd_core::hypotheses::{validate, ValidationGrid};
use adaptqsd_core::oracle::{build_generator, leading_triple, oracle_q_kernel};
use adaptqsd_core::qsd::{
    autocorrelation, balance_residual, beta_from, convergence_curve, estimate_eta, estimate_lambda0_survival,
    fleming_viot, truncation_family, tv_distance, write_truncation_csv, CurveConfig, EmpiricalMeasure, EtaConfig,
    EtaEstimate, FvConfig, FvRun, Histogram, InitDist, MeasureMeta, SurvivalConfig,
};
use adaptqsd_core::{
    simulate_path, simulate_q_path, Binning, Error, HypothesisReport, Lag, ModelParams, QConfig, SimConfig, State,
    StreamKey,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::{CliError, Command, RunConfig};

const TAG_SIMULATE: u64 = 0x51;
const TAG_QPATH: u64 = 0x9A;

/// Survivors needed before a two-horizon node or a TV slice counts.
const MIN_SURVIVORS: u64 = 50;
const BOOTSTRAP: usize = 100;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    params: ModelParams,
    sim: SimConfig,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let f = File::create(self.out.join(name))?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn write_with<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let mut w = self.create(name)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))?;
        self.write_with(name, |w| writeln!(w, "{text}"))
    }

    /// Start point: `(x0, y0)`, with `y0` defaulting to the carrying capacity,
    /// pulled inside the size band when truncation is on.
    fn start(&self) -> State {
        let x = Lag::from_slice(&self.cfg.x0);
        let y = self.cfg.y0.unwrap_or_else(|| {
            let yk = self.params.carrying_capacity_y(&self.cfg.x0);
            match self.sim.truncation {
                Some(l) => yk.clamp(2.0 / l, l / 2.0),
                None => yk,
            }
        });
        State::alive(x, y)
    }

    fn fv(&self) -> Result<FvRun, CliError> {
        let fv = FvConfig {
            particles: self.cfg.particles,
            burn_in: self.cfg.burn_in(),
            window: self.cfg.window,
            batches: self.cfg.batches,
            ..FvConfig::default()
        };
        let binning = self.cfg.binning()?;
        Ok(fleming_viot(
            &InitDist::Point(self.start()),
            &fv,
            &binning,
            &self.sim,
            &self.params,
            self.cfg.seed,
        )?)
    }

    fn write_alpha(&mut self, run: &FvRun) -> Result<(), CliError> {
        self.write_with("alpha.csv", |w| run.alpha.write_csv(w))?;
        self.write_json("fv.json", run)
    }

    fn eta(&self, run: &FvRun, second_horizon: bool) -> Result<EtaEstimate, CliError> {
        let ec = EtaConfig {
            nodes: self.cfg.eta_nodes()?,
            t_eval: self.cfg.eta_t,
            replicates: self.cfg.eta_replicates,
            second_horizon,
        };
        Ok(estimate_eta(
            &ec,
            run.lambda0,
            &run.alpha,
            &self.sim,
            &self.params,
            self.cfg.seed,
        )?)
    }

    fn manifest(&mut self, command: Command, report: &HypothesisReport) -> Result<(), CliError> {
        let m = json!({
            "command": command.name(),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": {
                "adaptqsd-core": adaptqsd_core::VERSION,
                "adaptqsd-cli": env!("CARGO_PKG_VERSION"),
            },
            "hypotheses_pass": report.all_applicable_pass(),
            "stability": self.sim.stability_note(),
            "config": self.cfg,
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.into()))?;
        std::fs::write(self.out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

pub fn dispatch(command: Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let params = cfg.params()?;
    let sim = cfg.sim()?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    let mut ctx = Ctx {
        cfg,
        out,
        params,
        sim,
        outputs: Vec::new(),
    };

    let report = validate(&ctx.params, &ValidationGrid::default());
    if command == Command::Validate {
        print!("{report}");
        ctx.write_json("hypotheses.json", &report)?;
        ctx.manifest(command, &report)?;
    }
    if !report.all_applicable_pass() {
        let names: Vec<String> = report.missing_requirements().iter().map(|h| h.to_string()).collect();
        let msg = format!("required: {}", names.join(" "));
        // diagnostics stay available on failing configs; the manifest records the verdict
        if command != Command::Diagnose {
            return Err(CliError::Hypothesis(msg));
        }
        eprintln!("warning: hypothesis violated, {msg}; diagnostics only");
    }

    match command {
        Command::Validate => return Ok(()),
        Command::Simulate => simulate(&mut ctx)?,
        Command::Fv => {
            let run = ctx.fv()?;
            println!(
                "lambda0 = {:.5} ± {:.5} (batch se {:.5}); burn-in {:.2}",
                run.lambda0, run.lambda0_se, run.lambda0_batch_se, run.burn_in
            );
            ctx.write_alpha(&run)?;
        }
        Command::Lambda => lambda(&mut ctx)?,
        Command::Eta => eta(&mut ctx)?,
        Command::Qprocess => qprocess(&mut ctx)?,
        Command::Oracle => oracle(&mut ctx)?,
        Command::Diagnose => diagnose(&mut ctx)?,
    }
    ctx.manifest(command, &report)
}

fn simulate(ctx: &mut Ctx) -> Result<(), CliError> {
    let mut stream = StreamKey::new(ctx.cfg.seed, &[TAG_SIMULATE]).stream();
    let sigma = ctx.params.sigma;
    match simulate_path(&ctx.start(), &ctx.sim, &mut stream, &ctx.params) {
        Ok(tr) => {
            println!(
                "{} at t = {} after {} jumps",
                tr.exit.kind.label(),
                tr.exit.time,
                tr.jumps.len()
            );
            ctx.write_with("trajectory.csv", |w| tr.write_csv(w, sigma))
        }
        Err(Error::PathNumeric { time, message, partial }) => {
            // keep what was simulated before the failure
            ctx.write_with("trajectory.csv", |w| partial.write_csv(w, sigma))?;
            Err(CliError::Run(Error::Numeric(format!("at t = {time}: {message}"))))
        }
        Err(e) => Err(e.into()),
    }
}

fn lambda(ctx: &mut Ctx) -> Result<(), CliError> {
    let run = ctx.fv()?;
    ctx.write_alpha(&run)?;
    let sc = SurvivalConfig {
        replicates: ctx.cfg.replicates,
        horizon: ctx.cfg.surv_horizon,
        fit_from: ctx.cfg.surv_fit_from,
        grid_points: ctx.cfg.surv_grid,
        ..SurvivalConfig::default()
    };
    let fit = estimate_lambda0_survival(
        &InitDist::Measure(run.alpha.clone()),
        &sc,
        &ctx.sim,
        &ctx.params,
        ctx.cfg.seed,
    )?;
    let fv_ci = (run.lambda0 - 1.96 * run.lambda0_se, run.lambda0 + 1.96 * run.lambda0_se);
    let joint = (run.lambda0_se.powi(2) + fit.se.powi(2)).sqrt();
    println!(
        "fleming-viot {:.5} ± {:.5}; survival {:.5} ± {:.5} (R^2 {:.4}); difference {:.2} joint sd",
        run.lambda0,
        run.lambda0_se,
        fit.lambda0,
        fit.se,
        fit.r2,
        (run.lambda0 - fit.lambda0).abs() / joint
    );
    ctx.write_json(
        "lambda0.json",
        &json!({
            "fleming_viot": {
                "lambda0": run.lambda0,
                "se": run.lambda0_se,
                "batch_se": run.lambda0_batch_se,
                "ci95": fv_ci,
                "kills_in_window": run.kills_in_window,
            },
            "survival": fit,
            "difference_joint_sd": (run.lambda0 - fit.lambda0).abs() / joint,
        }),
    )
}

fn eta(ctx: &mut Ctx) -> Result<(), CliError> {
    let run = ctx.fv()?;
    ctx.write_alpha(&run)?;
    let est = ctx.eta(&run, true)?;
    let beta = beta_from(&run.alpha, &est.eta)?;
    let check = est.two_horizon_check(run.lambda0_se, MIN_SURVIVORS, 3.0);
    if let Some(c) = &check {
        println!(
            "two horizons: {} of {} nodes beyond 3 se (max z {:.2})",
            c.violations, c.compared, c.max_z
        );
    }
    ctx.write_with("eta.csv", |w| est.write_csv(w))?;
    ctx.write_with("beta.csv", |w| beta.write_csv(w))?;
    ctx.write_json(
        "eta.json",
        &json!({
            "t_eval": est.primary.t,
            "lambda0": est.lambda0,
            "scale": est.scale,
            "replicates": est.replicates,
            "zero_nodes": est.zero_nodes,
            "resolution": est.resolution,
            "two_horizon": check,
        }),
    )
}

/// Smallest factor leaving at most 10 cells on an axis of `n` cells.
fn coarse_factor(n: usize) -> usize {
    (1..=n).find(|f| n.is_multiple_of(*f) && n / f <= 10).unwrap_or(n)
}

fn qprocess(ctx: &mut Ctx) -> Result<(), CliError> {
    let run = ctx.fv()?;
    let est = ctx.eta(&run, false)?;
    let beta = beta_from(&run.alpha, &est.eta)?;
    ctx.write_with("beta.csv", |w| beta.write_csv(w))?;

    let sim = SimConfig {
        horizon: ctx.cfg.q_horizon,
        ..ctx.sim
    };
    let qcfg = QConfig {
        delta: ctx.cfg.q_delta,
        ..QConfig::default()
    };
    let (seed, params) = (ctx.cfg.seed, &ctx.params);
    let paths: Vec<_> = (0..ctx.cfg.q_starts as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = StreamKey::new(seed, &[TAG_QPATH, i]).stream();
            let init = beta.sample(&mut s);
            simulate_q_path(&init, &sim, &qcfg, &est.eta, &mut s, params)
        })
        .collect();

    let mut hist = Histogram::new(&beta.binning);
    let mut failures = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        match p {
            Ok(tr) => {
                let last = tr.final_sample();
                hist.add(&last.x, last.y);
                if i < ctx.cfg.q_paths_written {
                    let sigma = ctx.params.sigma;
                    ctx.write_with(&format!("qpath_{i:04}.csv"), |w| tr.write_csv(w, sigma))?;
                }
            }
            Err(e) => failures.push(format!("path {i}: {e}")),
        }
    }
    if hist.total() == 0.0 {
        return Err(CliError::Run(Error::Numeric(format!(
            "every Q-process path failed; first: {}",
            failures.first().map_or("", String::as_str)
        ))));
    }
    let meta = MeasureMeta {
        particles: ctx.cfg.q_starts,
        window: (ctx.cfg.q_horizon, ctx.cfg.q_horizon),
        seed,
        samples: hist.total() as u64,
    };
    let marginal = hist.normalized(meta)?;
    let (fx, fy) = (
        coarse_factor(beta.binning.x_axes[0].n),
        coarse_factor(beta.binning.y_axis.n),
    );
    let tv = tv_distance(&marginal.coarsen(fx, fy)?, &beta.coarsen(fx, fy)?)?;
    println!(
        "TV(Q-process marginal at t = {}, beta) = {tv:.4} on coarse cells; {} failed paths",
        ctx.cfg.q_horizon,
        failures.len()
    );
    ctx.write_with("q_marginal.csv", |w| marginal.write_csv(w))?;
    ctx.write_json(
        "qprocess.json",
        &json!({
            "horizon": ctx.cfg.q_horizon,
            "starts": ctx.cfg.q_starts,
            "tv_to_beta_coarse": tv,
            "coarsening": [fx, fy],
            "failures": failures,
        }),
    )
}

fn oracle(ctx: &mut Ctx) -> Result<(), CliError> {
    if ctx.params.dim != 1 {
        return Err(CliError::Config("the oracle is only available for dim = 1".into()));
    }
    let Some(l) = ctx.cfg.l else {
        return Err(CliError::Config("the oracle needs a truncation level L".into()));
    };
    let gen = build_generator(&ctx.params, l, ctx.cfg.oracle_nx, ctx.cfg.oracle_ny)?;
    let triple = leading_triple(&gen)?;
    let q = oracle_q_kernel(&gen, &triple, 1.0)?;
    println!(
        "oracle lambda0 = {:.6}, gap {:.4}; residuals {:.2e} / {:.2e}",
        triple.lambda0, triple.gap, triple.residual_alpha, triple.residual_eta
    );

    let meta = MeasureMeta::default();
    let alpha = EmpiricalMeasure::from_counts(gen.binning.clone(), &triple.alpha, 0.0, meta)?;
    // same scaling as the Monte Carlo estimate: <alpha, eta> = 1
    let norm: f64 = triple.alpha.iter().zip(&triple.eta).map(|(a, e)| a * e).sum();
    let binning = gen.binning.clone();
    ctx.write_with("oracle_alpha.csv", |w| alpha.write_csv(w))?;
    ctx.write_with("oracle_eta.csv", |w| {
        writeln!(w, "x1,y,eta")?;
        for (i, e) in triple.eta.iter().enumerate() {
            let (x, y) = binning.cell_center(i);
            writeln!(w, "{},{},{}", x[0], y, e / norm)?;
        }
        Ok(())
    })?;
    ctx.write_json(
        "oracle.json",
        &json!({
            "lambda0": triple.lambda0,
            "gap": triple.gap,
            "residual_alpha": triple.residual_alpha,
            "residual_eta": triple.residual_eta,
            "iterations": triple.iterations,
            "irreducible_fraction": triple.irreducible_fraction,
            "q_kernel": q,
            "grid": gen.spec,
        }),
    )
}

fn diagnose(ctx: &mut Ctx) -> Result<(), CliError> {
    let run = ctx.fv()?;
    ctx.write_alpha(&run)?;

    let bal = balance_residual(&run.alpha, &ctx.params)?;
    println!(
        "balance: v = {}, flux = {:.5}, residual {:.5} (error {:.5})",
        bal.lhs, bal.rhs, bal.residual, bal.combined_error
    );
    ctx.write_json("balance.json", &bal)?;

    let n = (ctx.cfg.curve_t_max / ctx.cfg.curve_dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * ctx.cfg.curve_dt).collect();
    let cc = CurveConfig {
        times: times.clone(),
        replicates: ctx.cfg.curve_replicates,
        min_survivors: MIN_SURVIVORS as usize,
        fit_from: ctx.cfg.curve_fit_from,
        bootstrap: BOOTSTRAP,
    };
    let start = InitDist::Point(ctx.start());
    let mut curve = convergence_curve(&start, &cc, &run.alpha, &ctx.sim, &ctx.params, ctx.cfg.seed)?;
    curve.compare_rate(run.lambda0);
    let (small, large, pairs) = curve.monotonicity();
    ctx.write_with("convergence.csv", |w| curve.write_csv(w))?;

    let acf = autocorrelation(
        &start,
        &times,
        ctx.cfg.acf_replicates,
        &ctx.sim,
        &ctx.params,
        ctx.cfg.seed,
    )?;
    match curve.fit {
        Some(f) => println!(
            "convergence rate gamma = {:.4} ± {:.4} (R^2 {:.4}); lambda0 / gamma = {:.3}",
            f.gamma,
            f.gamma_se,
            f.r2,
            curve.rate_ratio.unwrap_or(f64::NAN)
        ),
        None => println!("convergence curve: too few usable points for a fit"),
    }
    ctx.write_json(
        "rates.json",
        &json!({
            "lambda0": run.lambda0,
            "lambda0_se": run.lambda0_se,
            "convergence_fit": curve.fit,
            "lambda0_over_gamma": curve.rate_ratio,
            "comparable_rates": curve.comparable_rates,
            "tv_rises": { "within_1sd": small, "beyond_1sd": large, "pairs": pairs },
            "dropped_times": curve.dropped,
            "autocorrelation": acf,
        }),
    )?;

    let ls = &ctx.cfg.l_list;
    let l_max = ls.iter().cloned().fold(f64::NAN, f64::max);
    let binning =
        Binning::truncation_box(ctx.params.dim, l_max, ctx.cfg.bins_x, ctx.cfg.bins_y).map_err(CliError::from_setup)?;
    let fv = FvConfig {
        particles: ctx.cfg.particles,
        burn_in: ctx.cfg.burn_in(),
        window: ctx.cfg.window,
        batches: ctx.cfg.batches,
        ..FvConfig::default()
    };
    let base = SimConfig {
        truncation: None,
        ..ctx.sim
    };
    let rows = truncation_family(ls, &fv, &binning, &base, &ctx.params, ctx.cfg.seed)?;
    for r in &rows {
        println!(
            "L = {}: lambda = {:.5} ± {:.5}, TV to largest L {:.4}",
            r.l, r.lambda, r.lambda_se, r.tv_to_last
        );
    }
    ctx.write_with("truncation.csv", |w| write_truncation_csv(&rows, w))
}
