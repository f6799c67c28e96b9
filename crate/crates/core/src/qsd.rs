//! Quasi-stationary estimation.
//!
//! The QSD `alpha` comes from a Fleming-Viot ensemble, the extinction rate from
//! its kill intensity and from survival regression, `eta` from survival
//! probabilities started at grid nodes, and `beta = eta alpha`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, Binning, GridFn, Spacing};
use crate::model::{Lag, ModelParams, State};
use crate::pathsim::{Engine, SimConfig, Walker};
use crate::rng::{Stream, StreamKey};
use crate::stats::{linear_fit, mean_var};

const TAG_FV: u64 = 0xF1;
const TAG_SURVIVAL: u64 = 0x5A;
const TAG_ETA: u64 = 0xE7;
const TAG_CURVE: u64 = 0xC0;
const TAG_BOOT: u64 = 0xB0;
const TAG_ACF: u64 = 0xAC;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureMeta {
    pub particles: usize,
    pub window: (f64, f64),
    pub seed: u64,
    /// Number of recorded states behind the histogram.
    pub samples: u64,
}

/// Normalized histogram on a product binning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub binning: Binning,
    pub masses: Vec<f64>,
    /// Fraction of recorded states outside the box; not part of `masses`.
    pub outside: f64,
    pub meta: MeasureMeta,
    /// Normalized histograms of consecutive sub-windows, for batch-means errors.
    #[serde(default, skip_serializing)]
    pub batches: Vec<Vec<f64>>,
}

/// Unnormalized counts on a binning.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub binning: Binning,
    pub counts: Vec<f64>,
    pub outside: f64,
}

impl Histogram {
    pub fn new(binning: &Binning) -> Self {
        Histogram {
            binning: binning.clone(),
            counts: vec![0.0; binning.len()],
            outside: 0.0,
        }
    }

    #[inline]
    pub fn add(&mut self, x: &[f64], y: f64) {
        match self.binning.locate(x, y) {
            Some(b) => self.counts[b] += 1.0,
            None => self.outside += 1.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum::<f64>() + self.outside
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0.0);
        self.outside = 0.0;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.outside += other.outside;
    }

    pub fn normalized(&self, meta: MeasureMeta) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_counts(self.binning.clone(), &self.counts, self.outside, meta)
    }
}

impl EmpiricalMeasure {
    pub fn from_counts(binning: Binning, counts: &[f64], outside: f64, meta: MeasureMeta) -> Result<Self> {
        if counts.len() != binning.len() {
            return Err(Error::BinningMismatch(format!(
                "{} counts for {} bins",
                counts.len(),
                binning.len()
            )));
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::DegenerateMeasure("negative or NaN bin count".into()));
        }
        let inside: f64 = counts.iter().sum();
        if !(inside > 0.0) {
            return Err(Error::DegenerateMeasure("no mass inside the binning box".into()));
        }
        Ok(EmpiricalMeasure {
            binning,
            masses: counts.iter().map(|c| c / inside).collect(),
            outside: outside / (inside + outside),
            meta,
            batches: Vec::new(),
        })
    }

    /// All mass in the cell containing `(x, y)`.
    pub fn point(binning: Binning, x: &[f64], y: f64) -> Result<Self> {
        let b = binning
            .locate(x, y)
            .ok_or_else(|| Error::Domain(format!("({x:?}, {y}) is outside the binning")))?;
        let mut counts = vec![0.0; binning.len()];
        counts[b] = 1.0;
        EmpiricalMeasure::from_counts(binning, &counts, 0.0, MeasureMeta::default())
    }

    pub fn uniform(binning: Binning) -> Self {
        let n = binning.len();
        EmpiricalMeasure::from_counts(binning, &vec![1.0; n], 0.0, MeasureMeta::default()).expect("nonempty binning")
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn coarsen(&self, fx: usize, fy: usize) -> Result<EmpiricalMeasure> {
        let (coarse, map) = self.binning.coarsen_map(fx, fy)?;
        let len = coarse.len();
        let fold = |m: &[f64]| {
            let mut out = vec![0.0; len];
            for (b, &c) in map.iter().enumerate() {
                out[c] += m[b];
            }
            out
        };
        let mut out = EmpiricalMeasure::from_counts(coarse, &fold(&self.masses), 0.0, self.meta.clone())?;
        out.outside = self.outside;
        out.batches = self.batches.iter().map(|b| fold(b)).collect();
        Ok(out)
    }

    /// Mean lag under the measure, from cell centers.
    pub fn mean_lag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.binning.dim()];
        for (b, &m) in self.masses.iter().enumerate() {
            if m > 0.0 {
                let (x, _) = self.binning.cell_center(b);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o += m * xi;
                }
            }
        }
        out
    }

    /// Draws a bin by mass and a point uniformly inside it (log-uniformly on a log axis).
    pub fn sample(&self, stream: &mut Stream) -> State {
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut bin = self.masses.len() - 1;
        for (b, &m) in self.masses.iter().enumerate() {
            acc += m;
            if u < acc {
                bin = b;
                break;
            }
        }
        while self.masses[bin] <= 0.0 && bin > 0 {
            bin -= 1;
        }
        let idx = self.binning.unflatten(bin);
        let d = self.binning.dim();
        let mut x = [0.0; 3];
        for k in 0..d {
            x[k] = within(&self.binning.x_axes[k], idx[k], stream.uniform());
        }
        let y = within(&self.binning.y_axis, idx[d], stream.uniform());
        State::alive(Lag::from_slice(&x[..d]), y)
    }

    /// Columns: lag centers, size center, mass.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.binning.dim();
        let head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        writeln!(out, "{},y,mass", head.join(","))?;
        for (b, &m) in self.masses.iter().enumerate() {
            let (x, y) = self.binning.cell_center(b);
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", xs.join(","), y, m)?;
        }
        Ok(())
    }
}

fn within(axis: &Axis, i: usize, u: f64) -> f64 {
    let (a, b) = (axis.edge(i), axis.edge(i + 1));
    match axis.spacing {
        Spacing::Linear => a + u * (b - a),
        Spacing::Log => (a.ln() + u * (b.ln() - a.ln())).exp(),
    }
}

/// Half the L1 distance between bin masses.
pub fn tv_distance(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    if m1.binning != m2.binning {
        return Err(Error::BinningMismatch("measures live on different binnings".into()));
    }
    Ok(tv_masses(&m1.masses, &m2.masses))
}

fn tv_masses(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>()
}

/// Initial law of a particle.
#[derive(Clone, Debug)]
pub enum InitDist {
    Point(State),
    /// Uniform on `B(-tau e1, tau/2) x [1/2, 2]`, a set every point reaches with positive probability.
    Reference,
    /// Uniform choice among the given states.
    States(Vec<State>),
    Measure(EmpiricalMeasure),
}

impl InitDist {
    pub fn sample(&self, stream: &mut Stream, params: &ModelParams) -> State {
        match self {
            InitDist::Point(s) => *s,
            InitDist::Reference => {
                let d = params.dim;
                let tau = params.mutation.tau;
                let dir = stream.gaussian(d);
                let norm = dir.iter().map(|z| z * z).sum::<f64>().sqrt().max(1e-300);
                let radius = 0.5 * tau * stream.uniform().powf(1.0 / d as f64);
                let mut x = [0.0; 3];
                for k in 0..d {
                    x[k] = dir[k] / norm * radius;
                }
                x[0] -= tau;
                let y = 0.5 + 1.5 * stream.uniform();
                State::alive(Lag::from_slice(&x[..d]), y)
            }
            InitDist::States(v) => v[stream.index(v.len())],
            InitDist::Measure(m) => m.sample(stream),
        }
    }
}

fn check_start(s: &State, eng: &Engine) -> Result<()> {
    if !s.is_alive() || !eng.contains(&s.x, s.y) {
        return Err(Error::Domain(format!(
            "initial state ({:?}, {}) is outside the simulation domain",
            s.x, s.y
        )));
    }
    Ok(())
}

/// Death time of one path (infinite if it survives `horizon`).
fn death_time(init: &State, horizon: f64, eng: &Engine, stream: &mut Stream) -> Result<f64> {
    let mut w = Walker::new(init.x, init.y, 0.0);
    Ok(match w.advance(horizon, eng, stream, |_| {})? {
        Some(exit) => exit.time,
        None => f64::INFINITY,
    })
}

// ---------------------------------------------------------------- Fleming-Viot

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BurnIn {
    /// Ends when the histograms of two consecutive blocks are within `auto_tol` in TV.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvConfig {
    pub particles: usize,
    pub burn_in: BurnIn,
    pub window: f64,
    /// Sub-windows for batch-means errors.
    pub batches: usize,
    pub auto_block: f64,
    pub auto_tol: f64,
    pub max_burn_in: f64,
}

impl Default for FvConfig {
    fn default() -> Self {
        FvConfig {
            particles: 2000,
            burn_in: BurnIn::Auto,
            window: 50.0,
            batches: 10,
            auto_block: 2.5,
            auto_tol: 0.05,
            max_burn_in: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KillEvent {
    pub t: f64,
    pub killed: usize,
    pub donor: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FvRun {
    pub alpha: EmpiricalMeasure,
    /// Kills in the window per particle per unit time.
    pub lambda0: f64,
    /// Poisson standard error of `lambda0`.
    pub lambda0_se: f64,
    /// Batch-means standard error of `lambda0`, a check on the Poisson one.
    pub lambda0_batch_se: f64,
    pub kills_in_window: u64,
    pub burn_in: f64,
    pub burn_in_converged: bool,
    /// `(block end, TV to previous block)` on the coarse burn-in binning.
    pub burn_in_trace: Vec<(f64, f64)>,
    #[serde(skip)]
    pub kill_log: Vec<KillEvent>,
    #[serde(skip)]
    pub particles: Vec<State>,
}

impl FvRun {
    pub fn ensemble_size(&self) -> usize {
        self.particles.len()
    }
}

/// Coarsening factor giving between 4 and 10 cells on an axis of `n` cells.
fn coarse_factor(n: usize) -> usize {
    (1..=n)
        .filter(|f| n.is_multiple_of(*f) && n / f <= 10)
        .min()
        .unwrap_or(n)
}

/// Fleming-Viot ensemble; `alpha` is the occupation histogram over the window.
pub fn fleming_viot(
    init: &InitDist,
    fv: &FvConfig,
    binning: &Binning,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<FvRun> {
    let p = fv.particles;
    if p < 100 {
        return Err(Error::param("particles", format!("need at least 100, got {p}")));
    }
    if !(fv.window > 0.0) || fv.batches == 0 {
        return Err(Error::param("window", "window and batch count must be positive"));
    }
    if binning.dim() != params.dim {
        return Err(Error::BinningMismatch("binning and model dimensions differ".into()));
    }
    let eng = Engine::new(params, cfg)?;
    let v = params.v;
    let dt = cfg.dt_max;
    let mut streams: Vec<Stream> = (0..p)
        .map(|i| StreamKey::new(seed, &[TAG_FV, i as u64]).stream())
        .collect();
    let mut walkers = Vec::with_capacity(p);
    for s in streams.iter_mut() {
        let st = init.sample(s, params);
        check_start(&st, &eng)?;
        walkers.push(Walker::new(st.x, st.y, 0.0));
    }

    let fx = coarse_factor(binning.x_axes[0].n);
    let fy = coarse_factor(binning.y_axis.n);
    let (coarse, cmap) = binning.coarsen_map(fx, fy)?;
    let mut block_prev: Option<Vec<f64>> = None;
    let mut block = vec![0.0; coarse.len()];
    let block_steps = ((fv.auto_block / dt).round() as usize).max(1);
    let mut trace = Vec::new();

    let (mut burn_in, mut converged) = match fv.burn_in {
        BurnIn::Fixed(b) if b >= 0.0 => (Some(b), true),
        BurnIn::Fixed(b) => return Err(Error::param("burn_in", format!("negative: {b}"))),
        BurnIn::Auto => (None, false),
    };
    let mut burn_steps = burn_in.map(|b| (b / dt).round() as usize);
    let window_steps = ((fv.window / dt).round() as usize).max(1);
    let batch_len = window_steps.div_ceil(fv.batches);

    let mut hist = Histogram::new(binning);
    let mut batch_hist = Histogram::new(binning);
    let mut batches = Vec::with_capacity(fv.batches);
    let mut batch_kills = Vec::with_capacity(fv.batches);
    let mut kills_batch = 0u64;
    let mut kills_window = 0u64;
    let mut kill_log = Vec::new();
    let mut pool: Vec<usize> = Vec::with_capacity(p);
    let mut dead = vec![false; p];

    let mut k = 0usize;
    loop {
        k += 1;
        let t = k as f64 * dt;
        let exits: Vec<Option<f64>> = walkers
            .par_iter_mut()
            .zip(streams.par_iter_mut())
            .map(|(w, s)| Ok(w.advance(t, &eng, s, |_| {})?.map(|e| e.time)))
            .collect::<Result<_>>()?;
        let mut killed: Vec<(f64, usize)> = exits
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|te| (te, i)))
            .collect();
        if killed.len() == p {
            return Err(Error::MassExtinction {
                time: t,
                hint: format!("all {p} particles died in one step of {dt}; reduce dt_max or enlarge the domain"),
            });
        }
        killed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &killed {
            dead[i] = true;
        }
        pool.clear();
        pool.extend((0..p).filter(|&i| !dead[i]));
        let in_window = burn_steps.is_some_and(|b| k > b);
        for &(te, i) in &killed {
            let donor = pool[streams[i].index(pool.len())];
            let src = walkers[donor];
            walkers[i].t = t;
            walkers[i].copy_position(&src, v);
            dead[i] = false;
            pool.push(i);
            kill_log.push(KillEvent {
                t: te,
                killed: i,
                donor,
            });
        }

        match burn_steps {
            None => {
                for w in &walkers {
                    if let Some(b) = binning.locate(&w.x(v), w.y) {
                        block[cmap[b]] += 1.0;
                    }
                }
                if k.is_multiple_of(block_steps) {
                    let total: f64 = block.iter().sum();
                    let cur: Vec<f64> = block.iter().map(|c| c / total.max(1.0)).collect();
                    if let Some(prev) = &block_prev {
                        let tv = tv_masses(prev, &cur);
                        trace.push((t, tv));
                        if tv < fv.auto_tol || t >= fv.max_burn_in {
                            converged = tv < fv.auto_tol;
                            burn_in = Some(t);
                            burn_steps = Some(k);
                        }
                    }
                    block_prev = Some(cur);
                    block.iter_mut().for_each(|c| *c = 0.0);
                }
            }
            Some(b) if in_window => {
                kills_window += killed.len() as u64;
                kills_batch += killed.len() as u64;
                for w in &walkers {
                    batch_hist.add(&w.x(v), w.y);
                }
                let j = k - b;
                if j.is_multiple_of(batch_len) || j == window_steps {
                    hist.merge(&batch_hist);
                    let tot: f64 = batch_hist.counts.iter().sum();
                    if tot > 0.0 {
                        batches.push(batch_hist.counts.iter().map(|c| c / tot).collect::<Vec<_>>());
                    }
                    batch_kills
                        .push(kills_batch as f64 / (p as f64 * (j - (j - 1) / batch_len * batch_len) as f64 * dt));
                    kills_batch = 0;
                    batch_hist.clear();
                }
                if j == window_steps {
                    break;
                }
            }
            Some(_) => {}
        }
    }

    let b = burn_in.expect("window reached");
    let window = window_steps as f64 * dt;
    let meta = MeasureMeta {
        particles: p,
        window: (b, b + window),
        seed,
        samples: hist.total() as u64,
    };
    let mut alpha = hist.normalized(meta)?;
    alpha.batches = batches;
    let exposure = p as f64 * window;
    let batch_se = if batch_kills.len() >= 2 {
        (mean_var(&batch_kills).1 / batch_kills.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(FvRun {
        alpha,
        lambda0: kills_window as f64 / exposure,
        lambda0_se: (kills_window as f64).sqrt() / exposure,
        lambda0_batch_se: batch_se,
        kills_in_window: kills_window,
        burn_in: b,
        burn_in_converged: converged,
        burn_in_trace: trace,
        kill_log,
        particles: walkers.iter().map(|w| w.state(v)).collect(),
    })
}

// ---------------------------------------------------------- survival regression

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalConfig {
    pub replicates: usize,
    pub horizon: f64,
    /// Start of the fitted region.
    pub fit_from: f64,
    /// Points of the log-spaced time grid.
    pub grid_points: usize,
    pub bootstrap: usize,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        SurvivalConfig {
            replicates: 5000,
            horizon: 5.0,
            fit_from: 1.0,
            grid_points: 40,
            bootstrap: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SurvivalFit {
    pub lambda0: f64,
    /// Bootstrap standard error of the slope (doubled under `low_tail`).
    pub se: f64,
    pub ci95: (f64, f64),
    pub r2: f64,
    /// Fewer than 10 survivors at the last grid time.
    pub low_tail: bool,
    pub times: Vec<f64>,
    pub survivors: Vec<u64>,
    pub replicates: usize,
    pub fit_from: f64,
}

/// Weighted fit of `ln S(t)` on grid times `>= fit_from`; returns `(lambda, r2)`.
///
/// The points of a cumulative survival curve are correlated, but its log-increments
/// are conditionally independent: given `n` survivors at the start of a step of
/// length `dt`, `Var(d ln S) ~ (e^{lambda dt} - 1) / n` (binomial deaths). The slope
/// is the weighted fit through the origin of the increments, with the variances
/// taken at a pilot rate from the diagonal-weighted line, whose `R^2` is reported.
fn fit_survival(times: &[f64], surv: &[u64], r: usize, fit_from: f64) -> Option<(f64, f64)> {
    let rf = r as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ns = Vec::new();
    let mut ws = Vec::new();
    for (&t, &s) in times.iter().zip(surv) {
        if t >= fit_from && s > 0 {
            let frac = s as f64 / rf;
            xs.push(t);
            ys.push(frac.ln());
            ns.push(s as f64);
            ws.push(rf * frac / (1.0 - frac).max(1.0 / rf));
        }
    }
    let fit = linear_fit(&xs, &ys, &ws)?;
    // floor keeps the weights finite when the pilot line is flat
    let pilot = (-fit.slope).max(1.0 / (rf * (xs[xs.len() - 1] - xs[0])));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 1..xs.len() {
        let dt = xs[i] - xs[i - 1];
        let w = ns[i - 1] / (pilot * dt).exp_m1();
        num += w * dt * (ys[i] - ys[i - 1]);
        den += w * dt * dt;
    }
    if !(den > 0.0) {
        return None;
    }
    Some((-num / den, fit.r2))
}

fn count_survivors(deaths: &[f64], times: &[f64]) -> Vec<u64> {
    // deaths sorted ascending
    times
        .iter()
        .map(|&t| (deaths.len() - deaths.partition_point(|&d| d <= t)) as u64)
        .collect()
}

pub fn log_time_grid(horizon: f64, points: usize) -> Vec<f64> {
    let lo = horizon / 200.0;
    (0..points)
        .map(|i| lo * (horizon / lo).powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Extinction rate from the exponential tail of the survival curve.
pub fn estimate_lambda0_survival(
    init: &InitDist,
    sc: &SurvivalConfig,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<SurvivalFit> {
    if sc.replicates < 2 || sc.grid_points < 3 || !(sc.horizon > sc.fit_from) {
        return Err(Error::param(
            "survival",
            "need replicates >= 2, grid_points >= 3, horizon > fit_from",
        ));
    }
    let eng = Engine::new(params, cfg)?;
    let mut deaths: Vec<f64> = (0..sc.replicates)
        .into_par_iter()
        .map(|i| {
            let mut s = StreamKey::new(seed, &[TAG_SURVIVAL, i as u64]).stream();
            let st = init.sample(&mut s, params);
            check_start(&st, &eng)?;
            death_time(&st, sc.horizon, &eng, &mut s)
        })
        .collect::<Result<_>>()?;
    deaths.sort_by(f64::total_cmp);
    let times = log_time_grid(sc.horizon, sc.grid_points);
    let survivors = count_survivors(&deaths, &times);
    let r = sc.replicates;
    let (lambda0, r2) = fit_survival(&times, &survivors, r, sc.fit_from)
        .ok_or_else(|| Error::DegenerateMeasure("no survivors in the fitted region".into()))?;

    let mut boot_stream = StreamKey::new(seed, &[TAG_SURVIVAL, TAG_BOOT]).stream();
    let mut slopes = Vec::with_capacity(sc.bootstrap);
    let mut resample = vec![0.0; r];
    for _ in 0..sc.bootstrap {
        for d in resample.iter_mut() {
            *d = deaths[boot_stream.index(r)];
        }
        resample.sort_by(f64::total_cmp);
        if let Some((l, _)) = fit_survival(&times, &count_survivors(&resample, &times), r, sc.fit_from) {
            slopes.push(l);
        }
    }
    let low_tail = *survivors.last().expect("grid is nonempty") < 10;
    let mut se = mean_var(&slopes).1.sqrt();
    if low_tail {
        se *= 2.0;
    }
    Ok(SurvivalFit {
        lambda0,
        se,
        ci95: (lambda0 - 1.96 * se, lambda0 + 1.96 * se),
        r2,
        low_tail,
        times,
        survivors,
        replicates: r,
        fit_from: sc.fit_from,
    })
}

// ------------------------------------------------------------------------ eta

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaConfig {
    /// Nodes are the cell centers of this binning.
    pub nodes: Binning,
    pub t_eval: f64,
    pub replicates: usize,
    /// Also estimate at `2 t_eval` from the same paths.
    pub second_horizon: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EtaHorizon {
    pub t: f64,
    /// Scaled estimates and standard errors per node.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub survivors: Vec<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EtaEstimate {
    /// Estimate at `t_eval`, scaled so that `<alpha, eta> = 1`.
    pub eta: GridFn,
    pub primary: EtaHorizon,
    pub second: Option<EtaHorizon>,
    /// Factor applied to `e^{lambda0 t} P(survive)`.
    pub scale: f64,
    pub lambda0: f64,
    pub replicates: usize,
    /// Nodes without survivors at `t_eval`, where only `eta < resolution` is known.
    pub zero_nodes: Vec<usize>,
    pub resolution: f64,
    /// Per node, sample variance of the paired difference between horizons (scaled units).
    #[serde(skip)]
    pub paired_var: Vec<f64>,
}

/// Node-wise comparison of the two horizons.
#[derive(Clone, Debug, Serialize)]
pub struct TwoHorizonCheck {
    pub compared: usize,
    pub violations: usize,
    pub max_z: f64,
    pub worst_node: Option<usize>,
}

/// `eta(node) = e^{lambda0 t} P_node(t < extinction)`, scaled against `alpha`.
pub fn estimate_eta(
    ec: &EtaConfig,
    lambda0: f64,
    alpha: &EmpiricalMeasure,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<EtaEstimate> {
    if !(lambda0 >= 0.0) || !(ec.t_eval > 0.0) || ec.replicates < 2 {
        return Err(Error::param("eta", "need lambda0 >= 0, t_eval > 0, replicates >= 2"));
    }
    let eng = Engine::new(params, cfg)?;
    let t1 = ec.t_eval;
    let t2 = 2.0 * t1;
    let horizon = if ec.second_horizon { t2 } else { t1 };
    let r = ec.replicates;
    let n = ec.nodes.len();
    let counts: Vec<(u64, u64)> = (0..n)
        .into_par_iter()
        .map(|node| {
            let (x, y) = ec.nodes.cell_center(node);
            let st = State::alive(Lag::from_slice(&x), y);
            if !eng.contains(&st.x, st.y) {
                return Ok((0, 0));
            }
            let (mut s1, mut s2) = (0u64, 0u64);
            for rep in 0..r {
                let mut s = StreamKey::new(seed, &[TAG_ETA, node as u64, rep as u64]).stream();
                let d = death_time(&st, horizon, &eng, &mut s)?;
                if d > t1 {
                    s1 += 1;
                }
                if d > t2 {
                    s2 += 1;
                }
            }
            Ok((s1, s2))
        })
        .collect::<Result<_>>()?;

    let g1 = (lambda0 * t1).exp();
    let g2 = (lambda0 * t2).exp();
    let raw1: Vec<f64> = counts.iter().map(|c| g1 * c.0 as f64 / r as f64).collect();
    let unscaled = GridFn::new(ec.nodes.clone(), raw1.clone())?;
    let pairing: f64 = alpha
        .masses
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(b, &m)| {
            let (x, y) = alpha.binning.cell_center(b);
            m * unscaled.eval(&x, y)
        })
        .sum();
    if !(pairing > 0.0) {
        return Err(Error::DegenerateMeasure("eta vanishes on the support of alpha".into()));
    }
    let scale = 1.0 / pairing;
    let rf = r as f64;
    let horizon_of = |t: f64, g: f64, pick: fn(&(u64, u64)) -> u64| {
        let values: Vec<f64> = counts.iter().map(|c| scale * g * pick(c) as f64 / rf).collect();
        let stderr = counts
            .iter()
            .map(|c| {
                let q = pick(c) as f64 / rf;
                scale * g * (q * (1.0 - q) / (rf - 1.0)).sqrt()
            })
            .collect();
        EtaHorizon {
            t,
            values,
            stderr,
            survivors: counts.iter().map(pick).collect(),
        }
    };
    let primary = horizon_of(t1, g1, |c| c.0);
    let second = ec.second_horizon.then(|| horizon_of(t2, g2, |c| c.1));
    // paired difference per path: D = g2 1{d > t2} - g1 1{d > t1}, with {d > t2} inside {d > t1}
    let paired_var = counts
        .iter()
        .map(|&(a, b)| {
            let (a, b) = (a as f64 / rf, b as f64 / rf);
            // D takes g2 - g1 w.p. b, -g1 w.p. a - b, 0 otherwise
            let m = b * (g2 - g1) - (a - b) * g1;
            let m2 = b * (g2 - g1).powi(2) + (a - b) * g1 * g1;
            scale * scale * (m2 - m * m).max(0.0) * rf / (rf - 1.0)
        })
        .collect();
    let zero_nodes = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.0 == 0)
        .map(|(i, _)| i)
        .collect();
    Ok(EtaEstimate {
        eta: GridFn::new(ec.nodes.clone(), primary.values.clone())?,
        primary,
        second,
        scale,
        lambda0,
        replicates: r,
        zero_nodes,
        resolution: scale * g1 / rf,
        paired_var,
    })
}

impl EtaEstimate {
    /// Compares the horizons on nodes with at least `min_survivors` survivors at the
    /// second horizon. The error of the difference combines the paired Monte Carlo
    /// variance with the propagated uncertainty `lambda_se` of the rate used.
    pub fn two_horizon_check(&self, lambda_se: f64, min_survivors: u64, z_max: f64) -> Option<TwoHorizonCheck> {
        let second = self.second.as_ref()?;
        let r = self.replicates as f64;
        let t = self.primary.t;
        let mut out = TwoHorizonCheck {
            compared: 0,
            violations: 0,
            max_z: 0.0,
            worst_node: None,
        };
        for i in 0..self.primary.values.len() {
            if second.survivors[i] < min_survivors {
                continue;
            }
            let (a, b) = (self.primary.values[i], second.values[i]);
            // d/d lambda of (b - a) is 2t b - t a
            let lam = lambda_se * (2.0 * t * b - t * a);
            let se = (self.paired_var[i] / r + lam * lam).sqrt();
            let z = (b - a).abs() / se;
            out.compared += 1;
            if z > z_max {
                out.violations += 1;
            }
            if z > out.max_z {
                out.max_z = z;
                out.worst_node = Some(i);
            }
        }
        Some(out)
    }

    /// Columns: node lag, node size, value, stderr, survivors.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let b = &self.eta.binning;
        let d = b.dim();
        let head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        writeln!(out, "{},y,eta,stderr,survivors", head.join(","))?;
        for i in 0..b.len() {
            let (x, y) = b.cell_center(i);
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                xs.join(","),
                y,
                self.primary.values[i],
                self.primary.stderr[i],
                self.primary.survivors[i]
            )?;
        }
        Ok(())
    }
}

/// `beta = eta alpha`, renormalized; `eta` is interpolated at the bin centers.
pub fn beta_from(alpha: &EmpiricalMeasure, eta: &GridFn) -> Result<EmpiricalMeasure> {
    if alpha.binning.dim() != eta.binning.dim() {
        return Err(Error::BinningMismatch("alpha and eta have different dimensions".into()));
    }
    let w: Vec<f64> = alpha
        .masses
        .iter()
        .enumerate()
        .map(|(b, &m)| {
            if m == 0.0 {
                return 0.0;
            }
            let (x, y) = alpha.binning.cell_center(b);
            m * eta.eval(&x, y).max(0.0)
        })
        .collect();
    let mut beta = EmpiricalMeasure::from_counts(alpha.binning.clone(), &w, 0.0, alpha.meta.clone())
        .map_err(|_| Error::DegenerateMeasure("eta alpha vanishes on every bin".into()))?;
    beta.batches = alpha
        .batches
        .iter()
        .filter_map(|m| {
            let p: Vec<f64> = m
                .iter()
                .enumerate()
                .map(|(b, &v)| {
                    let (x, y) = alpha.binning.cell_center(b);
                    v * eta.eval(&x, y).max(0.0)
                })
                .collect();
            let s: f64 = p.iter().sum();
            (s > 0.0).then(|| p.iter().map(|v| v / s).collect())
        })
        .collect();
    Ok(beta)
}

// --------------------------------------------------------- convergence curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub times: Vec<f64>,
    pub replicates: usize,
    pub min_survivors: usize,
    /// Start of the fitted (post burn-in) region.
    pub fit_from: f64,
    pub bootstrap: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpFit {
    /// Fitted decay rate of `tv(t) = floor + amplitude e^{-gamma t}`.
    pub gamma: f64,
    pub gamma_se: f64,
    pub amplitude: f64,
    pub floor: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceCurve {
    pub times: Vec<f64>,
    pub tv: Vec<f64>,
    pub survivors: Vec<usize>,
    /// Bootstrap standard deviation of each TV value.
    pub tv_sd: Vec<f64>,
    /// Slices dropped for having too few survivors.
    pub dropped: Vec<f64>,
    pub fit_from: f64,
    pub fit: Option<ExpFit>,
    /// `lambda0 / gamma` when a rate is supplied through [`ConvergenceCurve::compare_rate`].
    pub rate_ratio: Option<f64>,
    /// Whether the extinction and convergence rates are of the same order (ratio in [0.1, 10]).
    pub comparable_rates: Option<bool>,
}

const NOT_ALIVE: u32 = u32::MAX;
const OUTSIDE: u32 = u32::MAX - 1;

fn tv_from_cells(cells: &[u32], reps: &[usize], ref_masses: &[f64]) -> (f64, usize) {
    let mut counts = vec![0.0; ref_masses.len()];
    let mut alive = 0usize;
    for &r in reps {
        let c = cells[r];
        if c != NOT_ALIVE {
            alive += 1;
            if c != OUTSIDE {
                counts[c as usize] += 1.0;
            }
        }
    }
    if alive == 0 {
        return (f64::NAN, 0);
    }
    // outside mass counts fully against the reference
    let inside: f64 = counts.iter().sum();
    let n = alive as f64;
    let tv = 0.5
        * (counts
            .iter()
            .zip(ref_masses)
            .map(|(c, m)| (c / n - m).abs())
            .sum::<f64>()
            + (n - inside) / n);
    (tv, alive)
}

/// Least squares fit of `floor + a e^{-gamma t}` with `floor >= 0`.
fn fit_exp_floor(t: &[f64], y: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if t.len() < 4 {
        return None;
    }
    let t0 = t[0];
    let span = (t[t.len() - 1] - t0).max(1e-12);
    let sse_at = |g: f64| -> (f64, f64, f64) {
        let e: Vec<f64> = t.iter().map(|&s| (-g * (s - t0)).exp()).collect();
        let n = t.len() as f64;
        let (se, sy) = (e.iter().sum::<f64>(), y.iter().sum::<f64>());
        let see: f64 = e.iter().map(|v| v * v).sum();
        let sey: f64 = e.iter().zip(y).map(|(a, b)| a * b).sum();
        let det = n * see - se * se;
        let (mut c, mut a) = if det.abs() > 1e-300 {
            ((see * sy - se * sey) / det, (n * sey - se * sy) / det)
        } else {
            (sy / n, 0.0)
        };
        if c < 0.0 {
            c = 0.0;
            a = sey / see;
        }
        let sse = e.iter().zip(y).map(|(ev, yv)| (yv - c - a * ev).powi(2)).sum();
        (sse, c, a)
    };
    let (lo, hi) = ((0.01 / span).ln(), (100.0 / span).ln());
    let grid = 400;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=grid {
        let g = (lo + (hi - lo) * i as f64 / grid as f64).exp();
        let sse = sse_at(g).0;
        if sse < best.0 {
            best = (sse, g);
        }
    }
    // golden-section polish in log gamma
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best.1.ln() - step, best.1.ln() + step);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if sse_at(c.exp()).0 < sse_at(d.exp()).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let g = (0.5 * (a + b)).exp();
    let (sse, c, amp) = sse_at(g);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    Some((g, c, amp * (g * t0).exp(), r2))
}

/// TV between the conditioned law at each time and `alpha_ref`, with an exponential fit.
pub fn convergence_curve(
    init: &InitDist,
    cc: &CurveConfig,
    alpha_ref: &EmpiricalMeasure,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<ConvergenceCurve> {
    if cc.times.is_empty() || cc.times.windows(2).any(|w| w[1] <= w[0]) || cc.times[0] < 0.0 {
        return Err(Error::param("times", "must be nonempty, nonnegative and increasing"));
    }
    let eng = Engine::new(params, cfg)?;
    let v = params.v;
    let binning = &alpha_ref.binning;
    let nt = cc.times.len();
    // per replicate, the cell at each slice
    let cells: Vec<Vec<u32>> = (0..cc.replicates)
        .into_par_iter()
        .map(|i| {
            let mut s = StreamKey::new(seed, &[TAG_CURVE, i as u64]).stream();
            let st = init.sample(&mut s, params);
            check_start(&st, &eng)?;
            let mut w = Walker::new(st.x, st.y, 0.0);
            let mut out = vec![NOT_ALIVE; nt];
            for (k, &t) in cc.times.iter().enumerate() {
                if t > 0.0 && w.advance(t, &eng, &mut s, |_| {})?.is_some() {
                    break;
                }
                out[k] = binning.locate(&w.x(v), w.y).map_or(OUTSIDE, |b| b as u32);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    // slice-major layout
    let slices: Vec<Vec<u32>> = (0..nt).map(|k| cells.iter().map(|c| c[k]).collect()).collect();
    let all: Vec<usize> = (0..cc.replicates).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut tv = Vec::new();
    let mut survivors = Vec::new();
    for (k, sl) in slices.iter().enumerate() {
        let (d, alive) = tv_from_cells(sl, &all, &alpha_ref.masses);
        if alive < cc.min_survivors {
            dropped.push(cc.times[k]);
        } else {
            kept.push(k);
            tv.push(d);
            survivors.push(alive);
        }
    }
    let times: Vec<f64> = kept.iter().map(|&k| cc.times[k]).collect();
    let fit_idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= cc.fit_from).collect();
    let fit_on = |tv: &[f64]| {
        let ts: Vec<f64> = fit_idx.iter().map(|&i| times[i]).collect();
        let ys: Vec<f64> = fit_idx.iter().map(|&i| tv[i]).collect();
        fit_exp_floor(&ts, &ys)
    };

    let mut boot = StreamKey::new(seed, &[TAG_CURVE, TAG_BOOT]).stream();
    let mut boot_tv: Vec<Vec<f64>> = Vec::with_capacity(cc.bootstrap);
    let mut gammas = Vec::new();
    let mut reps = vec![0usize; cc.replicates];
    for _ in 0..cc.bootstrap {
        for r in reps.iter_mut() {
            *r = boot.index(cc.replicates);
        }
        let curve: Vec<f64> = kept
            .iter()
            .map(|&k| tv_from_cells(&slices[k], &reps, &alpha_ref.masses).0)
            .collect();
        if let Some((g, ..)) = fit_on(&curve) {
            gammas.push(g);
        }
        boot_tv.push(curve);
    }
    let tv_sd = (0..times.len())
        .map(|i| {
            let col: Vec<f64> = boot_tv.iter().map(|c| c[i]).collect();
            mean_var(&col).1.sqrt()
        })
        .collect();
    let fit = fit_on(&tv).map(|(gamma, floor, amplitude, r2)| ExpFit {
        gamma,
        gamma_se: mean_var(&gammas).1.sqrt(),
        amplitude,
        floor,
        r2,
    });
    Ok(ConvergenceCurve {
        times,
        tv,
        survivors,
        tv_sd,
        dropped,
        fit_from: cc.fit_from,
        fit,
        rate_ratio: None,
        comparable_rates: None,
    })
}

impl ConvergenceCurve {
    pub fn compare_rate(&mut self, lambda0: f64) {
        if let Some(f) = self.fit {
            let ratio = lambda0 / f.gamma;
            self.rate_ratio = Some(ratio);
            self.comparable_rates = Some((0.1..=10.0).contains(&ratio));
        }
    }

    /// Monotonicity over the decaying part of the curve: slices after `fit_from` until TV
    /// comes within two bootstrap deviations of the fitted floor. A rise larger than the
    /// joint deviation of its pair is a violation. Returns `(rises within one deviation,
    /// violations, pairs)`.
    pub fn monotonicity(&self) -> (usize, usize, usize) {
        let floor = self.fit.map_or(0.0, |f| f.floor);
        let idx: Vec<usize> = (0..self.times.len())
            .filter(|&i| self.times[i] >= self.fit_from)
            .take_while(|&i| self.tv[i] - floor > 2.0 * self.tv_sd[i])
            .collect();
        let mut small = 0;
        let mut large = 0;
        for w in idx.windows(2) {
            let (a, b) = (w[0], w[1]);
            let rise = self.tv[b] - self.tv[a];
            if rise > 0.0 {
                let sd = (self.tv_sd[a].powi(2) + self.tv_sd[b].powi(2)).sqrt();
                if rise <= sd {
                    small += 1;
                } else {
                    large += 1;
                }
            }
        }
        (small, large, idx.len().saturating_sub(1))
    }

    /// Columns: t, tv, survivors, tv_sd.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,tv,survivors,tv_sd")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.times[i], self.tv[i], self.survivors[i], self.tv_sd[i]
            )?;
        }
        Ok(())
    }
}

/// Decay of the correlations of the lag and of the size along paths started from `init`.
#[derive(Clone, Debug, Serialize)]
pub struct Autocorrelation {
    pub times: Vec<f64>,
    pub corr_x: Vec<f64>,
    pub corr_y: Vec<f64>,
    pub survivors: Vec<usize>,
    /// Rate from a log-linear fit of the positive lag correlations.
    pub rate_x: Option<f64>,
    pub rate_y: Option<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let n = a.len() as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    cov / (va * vb).sqrt()
}

pub fn autocorrelation(
    init: &InitDist,
    times: &[f64],
    replicates: usize,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<Autocorrelation> {
    let eng = Engine::new(params, cfg)?;
    let v = params.v;
    let paths: Vec<(State, Vec<Option<(f64, f64)>>)> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut s = StreamKey::new(seed, &[TAG_ACF, i as u64]).stream();
            let st = init.sample(&mut s, params);
            check_start(&st, &eng)?;
            let mut w = Walker::new(st.x, st.y, 0.0);
            let mut out = vec![None; times.len()];
            for (k, &t) in times.iter().enumerate() {
                if w.advance(t, &eng, &mut s, |_| {})?.is_some() {
                    break;
                }
                out[k] = Some((w.x(v)[0], w.y));
            }
            Ok((st, out))
        })
        .collect::<Result<_>>()?;
    let mut corr_x = Vec::new();
    let mut corr_y = Vec::new();
    let mut survivors = Vec::new();
    for k in 0..times.len() {
        let mut x0 = Vec::new();
        let mut xt = Vec::new();
        let mut y0 = Vec::new();
        let mut yt = Vec::new();
        for (st, out) in &paths {
            if let Some((x, y)) = out[k] {
                x0.push(st.x[0]);
                xt.push(x);
                y0.push(st.y);
                yt.push(y);
            }
        }
        survivors.push(x0.len());
        if x0.len() >= 3 {
            corr_x.push(pearson(&x0, &xt));
            corr_y.push(pearson(&y0, &yt));
        } else {
            corr_x.push(f64::NAN);
            corr_y.push(f64::NAN);
        }
    }
    let rate = |c: &[f64]| {
        let (ts, ls): (Vec<f64>, Vec<f64>) = times
            .iter()
            .zip(c)
            .filter(|(_, &v)| v > 0.05)
            .map(|(&t, &v)| (t, v.ln()))
            .unzip();
        linear_fit(&ts, &ls, &vec![1.0; ts.len()]).map(|f| -f.slope)
    };
    Ok(Autocorrelation {
        rate_x: rate(&corr_x),
        rate_y: rate(&corr_y),
        times: times.to_vec(),
        corr_x,
        corr_y,
        survivors,
    })
}

// ----------------------------------------------------------------- balance

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Balance {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Batch-means error of `rhs` from the sub-window histograms.
    pub mc_error: f64,
    /// Quadrature and bin-center error of `rhs`.
    pub quad_error: f64,
    pub combined_error: f64,
    /// Mean lag under `alpha`; `lambda0` times this is the exact extinction correction.
    pub mean_lag: f64,
}

/// Mean displacement rate `int int w f(y) g(x, w) nu(dw) alpha(dx, dy)` (first lag
/// coordinate) against the speed `v`.
pub fn balance_residual(alpha: &EmpiricalMeasure, params: &ModelParams) -> Result<Balance> {
    if alpha.binning.dim() != params.dim {
        return Err(Error::BinningMismatch("alpha and model dimensions differ".into()));
    }
    let b = &alpha.binning;
    let d = b.dim();
    let n = b.len();
    let ny = b.y_axis.n;
    let nxs = n / ny;
    // displacement integral per lag cell, fine and coarse rules, at the center and averaged
    // over two Gauss points per lag axis
    let gauss = 0.5 / 3f64.sqrt();
    let per_lag: Vec<(f64, f64)> = (0..nxs)
        .into_par_iter()
        .map(|j| {
            let (x, _) = b.cell_center(j * ny);
            let idx = b.unflatten(j * ny);
            let center = params.displacement_integral(&x);
            let coarse = params.displacement_integral_coarse(&x);
            let mut avg = 0.0;
            let corners = 1usize << d;
            for c in 0..corners {
                let mut p = x.clone();
                for k in 0..d {
                    let sign = if c >> k & 1 == 1 { 1.0 } else { -1.0 };
                    p[k] += sign * gauss * b.x_axes[k].width(idx[k]);
                }
                avg += params.displacement_integral(&p) / corners as f64;
            }
            (center, (center - coarse).abs() + (avg - center).abs())
        })
        .collect();
    let f_y: Vec<f64> = (0..ny).map(|k| params.f(b.y_axis.center(k))).collect();
    let f_err: Vec<f64> = (0..ny)
        .map(|k| {
            let (lo, hi) = (b.y_axis.edge(k), b.y_axis.edge(k + 1));
            let mid = 0.5 * (lo + hi);
            let h = 0.5 * (hi - lo) / 3f64.sqrt();
            (0.5 * (params.f(mid - h) + params.f(mid + h)) - f_y[k]).abs()
        })
        .collect();
    let rhs_of = |m: &[f64]| -> f64 {
        m.iter()
            .enumerate()
            .map(|(bin, &mass)| mass * f_y[bin % ny] * per_lag[bin / ny].0)
            .sum()
    };
    let rhs = rhs_of(&alpha.masses);
    let quad_error: f64 = alpha
        .masses
        .iter()
        .enumerate()
        .map(|(bin, &mass)| {
            let (di, de) = per_lag[bin / ny];
            mass * (f_y[bin % ny] * de + f_err[bin % ny] * di.abs())
        })
        .sum();
    let mc_error = if alpha.batches.len() >= 2 {
        let per: Vec<f64> = alpha.batches.iter().map(|m| rhs_of(m)).collect();
        (mean_var(&per).1 / per.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    let lhs = params.v;
    Ok(Balance {
        lhs,
        rhs,
        residual: lhs - rhs,
        mc_error,
        quad_error,
        combined_error: (mc_error.powi(2) + quad_error.powi(2)).sqrt(),
        mean_lag: alpha.mean_lag()[0],
    })
}

// -------------------------------------------------------------- truncation

#[derive(Clone, Debug, Serialize)]
pub struct TruncationRow {
    pub l: f64,
    pub lambda: f64,
    pub lambda_se: f64,
    /// TV to the estimate at the largest `l`, on the common binning.
    pub tv_to_last: f64,
    pub burn_in: f64,
}

/// Fleming-Viot under each truncation level; histograms share `binning`.
pub fn truncation_family(
    ls: &[f64],
    fv: &FvConfig,
    binning: &Binning,
    cfg: &SimConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<Vec<TruncationRow>> {
    if ls.len() < 3 || ls.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("l_list", "need at least three increasing levels"));
    }
    let mut runs = Vec::with_capacity(ls.len());
    for (i, &l) in ls.iter().enumerate() {
        let c = (*cfg).with_truncation(l);
        let run = fleming_viot(
            &InitDist::Reference,
            fv,
            binning,
            &c,
            params,
            seed.wrapping_add(i as u64),
        )?;
        runs.push(run);
    }
    let last = &runs.last().expect("nonempty").alpha;
    runs.iter()
        .zip(ls)
        .map(|(r, &l)| {
            Ok(TruncationRow {
                l,
                lambda: r.lambda0,
                lambda_se: r.lambda0_se,
                tv_to_last: tv_distance(&r.alpha, last)?,
                burn_in: r.burn_in,
            })
        })
        .collect()
}

pub fn write_truncation_csv<W: Write>(rows: &[TruncationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "l,lambda,lambda_se,tv_to_last,burn_in")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.l, r.lambda, r.lambda_se, r.tv_to_last, r.burn_in
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FixationFamily, MutationSpec};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn small_binning() -> Binning {
        Binning::truncation_box(1, 4.0, 8, 6).unwrap()
    }

    #[test]
    fn tv_examples() {
        let b = small_binning();
        let u = EmpiricalMeasure::uniform(b.clone());
        assert_eq!(tv_distance(&u, &u).unwrap(), 0.0);
        let p = EmpiricalMeasure::point(b.clone(), &[0.1], 1.0).unwrap();
        let k = b.len() as f64;
        assert!((tv_distance(&p, &u).unwrap() - (1.0 - 1.0 / k)).abs() < 1e-12);
        let q = EmpiricalMeasure::point(b.clone(), &[-3.0], 1.0).unwrap();
        assert_eq!(tv_distance(&p, &q).unwrap(), 1.0);
        let other = EmpiricalMeasure::uniform(Binning::truncation_box(1, 4.0, 8, 3).unwrap());
        assert!(matches!(tv_distance(&u, &other), Err(Error::BinningMismatch(_))));
    }

    fn masses(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(a in masses(48), b in masses(48), c in masses(48)) {
            let bin = small_binning();
            let m = |v: &Vec<f64>| EmpiricalMeasure::from_counts(bin.clone(), v, 0.0, MeasureMeta::default()).unwrap();
            let (a, b, c) = (m(&a), m(&b), m(&c));
            for x in [&a, &b, &c] {
                prop_assert!((x.total() - 1.0).abs() < 1e-12);
                prop_assert!(x.masses.iter().all(|&v| v >= 0.0));
            }
            let ab = tv_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, tv_distance(&b, &a).unwrap());
            prop_assert!(ab <= tv_distance(&a, &c).unwrap() + tv_distance(&c, &b).unwrap() + 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn beta_support_follows_eta(a in masses(48), cut in 1usize..7) {
            let bin = small_binning();
            let alpha = EmpiricalMeasure::from_counts(bin.clone(), &a, 0.0, MeasureMeta::default()).unwrap();
            // eta vanishing on lag cells below `cut`, evaluated at centers exactly
            let eta: Vec<f64> = (0..bin.len()).map(|i| if i / 6 < cut { 0.0 } else { 1.0 + (i % 5) as f64 }).collect();
            let eta = GridFn::new(bin.clone(), eta).unwrap();
            match beta_from(&alpha, &eta) {
                Ok(beta) => {
                    prop_assert!((beta.total() - 1.0).abs() < 1e-12);
                    for i in 0..bin.len() {
                        if i / 6 < cut { prop_assert_eq!(beta.masses[i], 0.0); }
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::DegenerateMeasure(_))),
            }
        }
    }

    #[test]
    fn beta_with_unit_eta_is_alpha() {
        let b = small_binning();
        let a: Vec<f64> = (0..b.len()).map(|i| (i % 7) as f64).collect();
        let alpha = EmpiricalMeasure::from_counts(b.clone(), &a, 0.0, MeasureMeta::default()).unwrap();
        let beta = beta_from(&alpha, &GridFn::constant(b, 1.0)).unwrap();
        for (x, y) in alpha.masses.iter().zip(&beta.masses) {
            assert!((x - y).abs() < 1e-15);
        }
        let zero = GridFn::constant(alpha.binning.clone(), 0.0);
        assert!(matches!(beta_from(&alpha, &zero), Err(Error::DegenerateMeasure(_))));
    }

    #[test]
    fn sampling_stays_in_bins() {
        let b = small_binning();
        let a: Vec<f64> = (0..b.len()).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let m = EmpiricalMeasure::from_counts(b.clone(), &a, 0.0, MeasureMeta::default()).unwrap();
        let mut s = StreamKey::root(3).stream();
        for _ in 0..2000 {
            let st = m.sample(&mut s);
            let bin = b.locate(&st.x, st.y).unwrap();
            assert_eq!(bin % 3, 0);
        }
    }

    #[test]
    fn reference_set_draws() {
        let p = ModelParams::default_d1();
        let mut s = StreamKey::root(5).stream();
        for _ in 0..1000 {
            let st = InitDist::Reference.sample(&mut s, &p);
            assert!((st.x[0] + p.mutation.tau).abs() <= 0.5 * p.mutation.tau);
            assert!((0.5..=2.0).contains(&st.y));
        }
    }

    fn no_kill_params() -> ModelParams {
        let mut p = ModelParams::default_d1();
        p.mutation = MutationSpec::gaussian(0.0, 0.5);
        p.v = 0.0;
        p
    }

    #[test]
    fn no_killing_gives_no_kills() {
        // no mutation, no drift of the lag, and an extinction level that the size
        // process at r(0) = 2 essentially never visits within the run
        let p = no_kill_params();
        let cfg = SimConfig {
            y_ext: 1e-9,
            dt_max: 0.02,
            ..SimConfig::default()
        };
        let binning = Binning::with_y_range(1, 1.0, 0.5, 10.0, 4, 20).unwrap();
        let fv = FvConfig {
            particles: 100,
            burn_in: BurnIn::Fixed(1.0),
            window: 5.0,
            ..FvConfig::default()
        };
        let init = InitDist::Point(State::alive(Lag::scalar(0.0), p.carrying_capacity_y(&[0.0])));
        let run = fleming_viot(&init, &fv, &binning, &cfg, &p, 1).unwrap();
        assert!(run.kill_log.is_empty());
        assert_eq!(run.lambda0, 0.0);
        assert!((run.alpha.total() - 1.0).abs() < 1e-12);
        // all occupation stays in the lag cell of x = 0
        let x_cell_mass: f64 = (0..20).map(|k| run.alpha.masses[2 * 20 + k]).sum();
        assert!((x_cell_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleming_viot_conserves_and_logs_in_order() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig::default().with_truncation(4.0);
        let binning = Binning::truncation_box(1, 4.0, 20, 12).unwrap();
        let fv = FvConfig {
            particles: 200,
            burn_in: BurnIn::Auto,
            window: 5.0,
            ..FvConfig::default()
        };
        let run = fleming_viot(&InitDist::Reference, &fv, &binning, &cfg, &p, 9).unwrap();
        assert_eq!(run.ensemble_size(), 200);
        assert!(run.kill_log.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(run.kill_log.iter().all(|k| k.killed != k.donor && k.donor < 200));
        assert!(run.particles.iter().all(|s| s.is_alive()));
        assert!((run.alpha.total() - 1.0).abs() < 1e-12);
        assert!(run.lambda0 > 0.3 && run.lambda0 < 2.0, "{}", run.lambda0);
        // same seed, same run
        let again = fleming_viot(&InitDist::Reference, &fv, &binning, &cfg, &p, 9).unwrap();
        assert_eq!(again.alpha.masses, run.alpha.masses);
        assert_eq!(again.kill_log, run.kill_log);
    }

    #[test]
    fn doubling_particles_shrinks_se_by_root_two() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig::default().with_truncation(4.0);
        let binning = Binning::truncation_box(1, 4.0, 20, 12).unwrap();
        let run = |particles| {
            let fv = FvConfig {
                particles,
                burn_in: BurnIn::Fixed(5.0),
                window: 20.0,
                ..FvConfig::default()
            };
            fleming_viot(&InitDist::Reference, &fv, &binning, &cfg, &p, 21).unwrap()
        };
        let (a, b) = (run(300), run(600));
        let ratio = b.lambda0_se / a.lambda0_se;
        assert!((ratio - FRAC_1_SQRT_2).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn tiny_domain_is_mass_extinction() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig {
            dt_max: 0.5,
            ..SimConfig::default()
        }
        .with_truncation(1.05);
        let binning = Binning::truncation_box(1, 1.05, 4, 4).unwrap();
        let fv = FvConfig {
            particles: 100,
            burn_in: BurnIn::Fixed(0.0),
            window: 50.0,
            ..FvConfig::default()
        };
        let init = InitDist::Point(State::alive(Lag::scalar(0.0), 1.0));
        let err = fleming_viot(&init, &fv, &binning, &cfg, &p, 2).unwrap_err();
        assert!(matches!(err, Error::MassExtinction { .. }), "{err}");
    }

    #[test]
    fn survival_fit_recovers_rate_with_sparse_tail() {
        // deaths at exponential quantiles: no noise, long flat stretches late on
        for (r, lambda) in [(5000usize, 0.8), (200, 3.0)] {
            let deaths: Vec<f64> = (0..r)
                .map(|i| -((1.0 - (i as f64 + 0.5) / r as f64).ln()) / lambda)
                .collect();
            let times = log_time_grid(2.0, 40);
            let surv = count_survivors(&deaths, &times);
            let (fit, r2) = fit_survival(&times, &surv, r, 0.5).unwrap();
            assert!((fit - lambda).abs() < 0.05 * lambda, "{fit} vs {lambda}");
            assert!(r2 > 0.99);
        }
    }

    #[test]
    fn stronger_killing_has_faster_survival_decay() {
        let cfg = SimConfig::default().with_truncation(4.0);
        let sc = SurvivalConfig {
            replicates: 1000,
            horizon: 2.0,
            fit_from: 0.5,
            bootstrap: 20,
            ..SurvivalConfig::default()
        };
        let rate = |r0: f64| {
            let mut p = ModelParams::default_d1();
            p.mutation = MutationSpec::gaussian(0.0, 0.5);
            p.v = 0.0;
            p.growth = crate::model::GrowthSpec::Quadratic { r0, a: 0.5 };
            let init = InitDist::Point(State::alive(Lag::scalar(0.0), 1.0));
            estimate_lambda0_survival(&init, &sc, &cfg, &p, 4).unwrap()
        };
        let harsh = rate(-3.0);
        let mild = rate(0.5);
        assert!(harsh.lambda0 > mild.lambda0, "{} vs {}", harsh.lambda0, mild.lambda0);
    }

    #[test]
    fn eta_deep_in_maladapted_region_is_zero() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig::default().with_truncation(5.0);
        let nodes = Binning::truncation_box(1, 5.0, 5, 2).unwrap();
        let alpha = EmpiricalMeasure::uniform(nodes.clone());
        let ec = EtaConfig {
            nodes: nodes.clone(),
            t_eval: 2.0,
            replicates: 200,
            second_horizon: true,
        };
        let est = estimate_eta(&ec, 0.8, &alpha, &cfg, &p, 6).unwrap();
        // x = 4 lags badly (r = -6) with a small population
        let node = nodes.locate(&[4.0], 0.4).unwrap();
        assert_eq!(est.primary.values[node], 0.0);
        assert!(est.zero_nodes.contains(&node));
        let pairing: f64 = (0..nodes.len())
            .map(|b| {
                let (x, y) = nodes.cell_center(b);
                alpha.masses[b] * est.eta.eval(&x, y)
            })
            .sum();
        assert!((pairing - 1.0).abs() < 1e-12);
        assert!(est.two_horizon_check(0.0, 50, 3.0).is_some());
    }

    #[test]
    fn balance_trivial_cases() {
        let b = Binning::truncation_box(1, 4.0, 16, 8).unwrap();
        let a: Vec<f64> = (0..b.len()).map(|i| 1.0 + (i % 3) as f64).collect();
        let alpha = EmpiricalMeasure::from_counts(b, &a, 0.0, MeasureMeta::default()).unwrap();
        let mut p = ModelParams::default_d1();
        p.mutation = MutationSpec::gaussian(0.0, 0.5);
        let bal = balance_residual(&alpha, &p).unwrap();
        assert_eq!(bal.rhs, 0.0);
        assert_eq!(bal.residual, p.v);
        // symmetric fixation: logistic with s = 0 is constant in w
        let mut p = ModelParams::default_d1();
        p.fixation.s = 0.0;
        assert_eq!(p.fixation.family, FixationFamily::DeleteriousOk);
        let bal = balance_residual(&alpha, &p).unwrap();
        assert!(bal.rhs.abs() < 1e-12, "{}", bal.rhs);
    }

    #[test]
    fn exponential_floor_fit_recovers_rate() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = t.iter().map(|s| 0.03 + 0.8 * (-0.7 * s).exp()).collect();
        let (g, c, a, r2) = fit_exp_floor(&t, &y).unwrap();
        assert!((g - 0.7).abs() < 1e-6 && (c - 0.03).abs() < 1e-6 && (a - 0.8).abs() < 1e-5);
        assert!(r2 > 0.999_999);
    }

    #[test]
    fn survival_grid_counts() {
        let deaths = vec![0.5, 1.0, 2.0, f64::INFINITY];
        assert_eq!(count_survivors(&deaths, &[0.1, 1.0, 3.0]), vec![4, 2, 1]);
        let g = log_time_grid(5.0, 10);
        assert!((g[9] - 5.0).abs() < 1e-12 && (g[0] - 0.025).abs() < 1e-12);
    }
}
