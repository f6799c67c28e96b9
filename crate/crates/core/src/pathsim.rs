//! Exact-in-X path simulation of the lag/size process.
//!
//! Over each micro-step the size path is generated first (Euler-Maruyama with
//! boundary substepping), since it does not depend on the mutation point process
//! until the next jump. Mutation proposals are then thinned against the largest
//! arrival rate along that path; the first accepted proposal cuts the step short
//! and the rest of the size path is discarded. Between jumps the lag moves
//! analytically, `x(t) = x_k - v (t - t_k) e_1`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::{Lag, ModelParams, State};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt_max: f64,
    pub y_ext: f64,
    pub x_max: f64,
    pub horizon: f64,
    pub truncation: Option<f64>,
    pub substep_alpha: f64,
    /// Sampling interval of recorded trajectories; `None` records every `dt_max`.
    pub record_every: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_max: 0.01,
            y_ext: 1e-3,
            x_max: 40.0,
            horizon: 10.0,
            truncation: None,
            substep_alpha: 0.25,
            record_every: None,
        }
    }
}

impl SimConfig {
    /// Kills on leaving `B(0, l) x [1/l, l]`; the explosion guard moves to `10 l`.
    pub fn with_truncation(mut self, l: f64) -> Self {
        self.truncation = Some(l);
        self.x_max = 10.0 * l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("dt_max", self.dt_max),
            ("y_ext", self.y_ext),
            ("x_max", self.x_max),
            ("horizon", self.horizon),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::param(name, format!("must be positive and finite, got {value}")));
            }
        }
        if !(self.substep_alpha > 0.0 && self.substep_alpha <= 1.0) {
            return Err(Error::param("substep_alpha", "must lie in (0, 1]"));
        }
        if let Some(l) = self.truncation {
            if !(l > 1.0) || !l.is_finite() {
                return Err(Error::param("L", format!("truncation radius must exceed 1, got {l}")));
            }
            if self.y_ext >= 1.0 / l {
                return Err(Error::param("y_ext", format!("must be below 1/L = {}", 1.0 / l)));
            }
        }
        if let Some(r) = self.record_every {
            if !(r > 0.0) {
                return Err(Error::param("record_every", "must be positive"));
            }
        }
        Ok(())
    }

    /// Radius beyond which the lag is killed.
    pub fn kill_radius(&self) -> f64 {
        match self.truncation {
            Some(l) => l.min(self.x_max),
            None => self.x_max,
        }
    }

    /// Lower and upper killing levels for the size.
    pub fn y_bounds(&self) -> (f64, f64) {
        match self.truncation {
            Some(l) => ((1.0 / l).max(self.y_ext), l),
            None => (self.y_ext, f64::INFINITY),
        }
    }

    pub fn contains(&self, x: &[f64], y: f64) -> bool {
        let (lo, hi) = self.y_bounds();
        let xn = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        y > lo && y < hi && xn < self.kill_radius()
    }

    /// Human-readable account of the step-size controls in force.
    pub fn stability_note(&self) -> String {
        format!(
            "dt_sub <= min({}, {} y^2, {} / (|r|/2 + 3 gamma y^2))",
            self.dt_max, self.substep_alpha, self.substep_alpha
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    SurvivedHorizon,
    Extinct,
    LeftTruncation,
    ExplosionGuard,
}

impl ExitKind {
    pub fn label(self) -> &'static str {
        match self {
            ExitKind::SurvivedHorizon => "survived_horizon",
            ExitKind::Extinct => "extinct",
            ExitKind::LeftTruncation => "left_truncation",
            ExitKind::ExplosionGuard => "explosion_guard",
        }
    }

    pub fn is_kill(self) -> bool {
        self != ExitKind::SurvivedHorizon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exit {
    pub kind: ExitKind,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub w: Lag,
    pub x_pre: Lag,
    pub x_post: Lag,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Lag,
    pub y: f64,
}

/// Candidate bookkeeping of the h-transform sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QStats {
    pub candidates: u64,
    pub accepted: u64,
    pub killed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: Lag,
    pub t0: f64,
    pub v: f64,
    pub samples: Vec<Sample>,
    pub jumps: Vec<JumpEvent>,
    pub exit: Exit,
    pub q_stats: Option<QStats>,
}

impl Trajectory {
    fn start(x0: Lag, y0: f64, t0: f64, v: f64) -> Self {
        Trajectory {
            x0,
            t0,
            v,
            samples: vec![Sample { t: t0, x: x0, y: y0 }],
            jumps: Vec::new(),
            exit: Exit {
                kind: ExitKind::SurvivedHorizon,
                time: t0,
            },
            q_stats: None,
        }
    }

    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("trajectories hold their start point")
    }

    /// Lag at time `t` rebuilt from the start point and the jump list alone.
    pub fn reconstruct_x(&self, t: f64) -> Lag {
        let mut anchor = self.x0;
        let mut t_anchor = self.t0;
        for j in &self.jumps {
            if j.t > t {
                break;
            }
            let pre = anchor.drifted(self.v * (j.t - t_anchor));
            anchor = pre.plus(&j.w);
            t_anchor = j.t;
        }
        anchor.drifted(self.v * (t - t_anchor))
    }

    /// Rows `t, x_1..x_d, y, n, event, w_1..w_d` in time order.
    pub fn write_csv<W: Write>(&self, mut out: W, sigma: f64) -> std::io::Result<()> {
        let d = self.x0.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|k| format!("x_{k}")));
        header.extend(["y".into(), "n".into(), "event".into()]);
        header.extend((1..=d).map(|k| format!("w_{k}")));
        writeln!(out, "{}", header.join(","))?;
        let n_of = |y: f64| 0.25 * sigma * sigma * y * y;
        let row = |out: &mut W, t: f64, x: &Lag, y: f64, ev: &str, w: Option<&Lag>| -> std::io::Result<()> {
            write!(out, "{t}")?;
            for c in x.iter() {
                write!(out, ",{c}")?;
            }
            write!(out, ",{y},{},{ev}", n_of(y))?;
            match w {
                Some(w) => {
                    for c in w.iter() {
                        write!(out, ",{c}")?;
                    }
                }
                None => {
                    for _ in 0..d {
                        write!(out, ",")?;
                    }
                }
            }
            writeln!(out)
        };
        let mut ji = 0;
        let last = self.samples.len() - 1;
        for (si, s) in self.samples.iter().enumerate() {
            while ji < self.jumps.len() && self.jumps[ji].t <= s.t {
                let j = &self.jumps[ji];
                row(&mut out, j.t, &j.x_post, j.y, "jump", Some(&j.w))?;
                ji += 1;
            }
            let ev = if si == last && self.exit.kind.is_kill() {
                format!("exit:{}", self.exit.kind.label())
            } else {
                "sample".to_string()
            };
            row(&mut out, s.t, &s.x, s.y, &ev, None)?;
        }
        Ok(())
    }
}

/// Result of a size-only Euler step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum YStep {
    Alive(f64),
    /// Crossed `y_ext` at the given offset into the step.
    Extinct {
        at: f64,
    },
}

#[inline]
fn substep_size(rem: f64, y: f64, r: f64, gamma: f64, alpha: f64) -> f64 {
    let dt = rem
        .min(alpha * y * y)
        .min(alpha / (0.5 * r.abs() + 3.0 * gamma * y * y));
    // avoid leaving a sliver at the end of the step
    if rem - dt < 1e-9 * rem {
        rem
    } else {
        dt
    }
}

/// Euler-Maruyama for the size with the lag frozen, substepped so that
/// `dt_sub <= substep_alpha y^2`. Each substep consumes one value from `noise`.
pub fn step_y(
    y: f64,
    x_frozen: &[f64],
    dt: f64,
    mut noise: impl FnMut() -> f64,
    params: &ModelParams,
    cfg: &SimConfig,
) -> Result<YStep> {
    if !(y > cfg.y_ext) {
        return Err(Error::Domain(format!("step_y needs y > y_ext, got {y}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step_y needs dt > 0, got {dt}")));
    }
    let r = params.r(x_frozen);
    let gamma = params.gamma();
    let mut s = 0.0;
    let mut yc = y;
    while s < dt {
        let h = substep_size(dt - s, yc, r, gamma, cfg.substep_alpha);
        let y1 = yc + params.psi_raw(r, yc) * h + h.sqrt() * noise();
        if !y1.is_finite() {
            return Err(Error::Numeric(format!("size became {y1} at offset {s}")));
        }
        if y1 <= cfg.y_ext {
            return Ok(YStep::Extinct {
                at: s + h * (yc - cfg.y_ext) / (yc - y1),
            });
        }
        s += h;
        yc = y1;
    }
    Ok(YStep::Alive(yc))
}

/// Size path over one micro-step: `(offset, y)` knots, linearly interpolated.
type YPath = SmallVec<[(f64, f64); 8]>;

#[inline]
fn interp(path: &YPath, s: f64) -> f64 {
    let k = path.partition_point(|&(t, _)| t <= s);
    if k == 0 {
        return path[0].1;
    }
    if k == path.len() {
        return path[k - 1].1;
    }
    let (t0, y0) = path[k - 1];
    let (t1, y1) = path[k];
    if t1 <= t0 {
        return y1;
    }
    y0 + (y1 - y0) * (s - t0) / (t1 - t0)
}

/// An accepted mutation proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpProposal {
    /// Offset into the step.
    pub at: f64,
    pub w: Lag,
    pub y: f64,
}

/// Thins the mutation point process over `[0, end]` along a known size path,
/// with the lag moving as `x0 - v s e_1`. The arrival rate is increasing in `y`,
/// so its maximum over the knots dominates the interpolated path exactly.
fn thin_over_path(
    x_at: impl Fn(f64) -> Lag,
    path: &YPath,
    end: f64,
    stream: &mut Stream,
    params: &ModelParams,
) -> Option<JumpProposal> {
    let mass = params.mutation.mass;
    if !(mass > 0.0) || !(end > 0.0) {
        return None;
    }
    let fmax = path.iter().map(|&(_, y)| params.f(y)).fold(0.0, f64::max);
    let g_sup = params.g_bound(x_at(0.0).norm().max(x_at(end).norm()));
    let rate = fmax * g_sup * mass;
    if !(rate > 0.0) {
        return None;
    }
    let mut e = 0.0;
    loop {
        e += crate::rng::exp_from_uniform(stream.uniform_open0(), rate);
        if e >= end {
            return None;
        }
        let w = stream.draw_mutation(&params.mutation, params.dim);
        let u_f = stream.uniform();
        let u_g = stream.uniform();
        let y_e = interp(path, e);
        if u_f * fmax > params.f(y_e) {
            continue;
        }
        let x_e = x_at(e);
        if u_g * g_sup <= params.g(&x_e, &w) {
            return Some(JumpProposal { at: e, w, y: y_e });
        }
    }
}

/// Thinning with the size frozen at `y` over a step of length `dt`; returns the
/// earliest accepted proposal, if any.
pub fn try_jump(state: &State, dt: f64, stream: &mut Stream, params: &ModelParams) -> Option<JumpProposal> {
    if !state.is_alive() {
        return None;
    }
    let mut path = YPath::new();
    path.push((0.0, state.y));
    path.push((dt, state.y));
    thin_over_path(|e| state.x.drifted(params.v * e), &path, dt, stream, params)
}

/// Deterministic time for `x - v s e_1` to reach norm `radius`, infinite if never.
fn lag_exit_time(x: &Lag, v: f64, radius: f64) -> f64 {
    if !radius.is_finite() {
        return f64::INFINITY;
    }
    let n2 = x.norm_sq();
    let c = n2 - radius * radius;
    if c >= 0.0 {
        return 0.0;
    }
    if v <= 0.0 {
        return f64::INFINITY;
    }
    // |x|^2 - 2 x_1 v s + v^2 s^2 = radius^2, take the positive root
    let x1 = x[0];
    (x1 + (x1 * x1 - c).sqrt()) / v
}

/// One outcome of [`Walker::micro_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Moved,
    Jumped(JumpEvent),
    Exited(Exit),
    JumpedOut(JumpEvent, Exit),
}

/// Per-run constants shared by every walker.
#[derive(Clone, Copy, Debug)]
pub struct Engine<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a SimConfig,
    gamma: f64,
    kill_radius: f64,
    y_lo: f64,
    y_hi: f64,
    y_lo_kind: ExitKind,
    x_kind: ExitKind,
}

impl<'a> Engine<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        let (y_lo, y_hi) = cfg.y_bounds();
        let y_lo_kind = match cfg.truncation {
            Some(l) if 1.0 / l > cfg.y_ext => ExitKind::LeftTruncation,
            _ => ExitKind::Extinct,
        };
        let x_kind = match cfg.truncation {
            Some(l) if l <= cfg.x_max => ExitKind::LeftTruncation,
            _ => ExitKind::ExplosionGuard,
        };
        Ok(Engine {
            params,
            cfg,
            gamma: params.gamma(),
            kill_radius: cfg.kill_radius(),
            y_lo,
            y_hi,
            y_lo_kind,
            x_kind,
        })
    }

    pub fn contains(&self, x: &[f64], y: f64) -> bool {
        self.cfg.contains(x, y)
    }
}

/// A live particle: lag kept in anchor form so that it is exact between jumps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Walker {
    x_anchor: Lag,
    t_anchor: f64,
    pub t: f64,
    pub y: f64,
}

impl Walker {
    pub fn new(x: Lag, y: f64, t: f64) -> Self {
        Walker {
            x_anchor: x,
            t_anchor: t,
            t,
            y,
        }
    }

    pub fn x_at(&self, t: f64, v: f64) -> Lag {
        self.x_anchor.drifted(v * (t - self.t_anchor))
    }

    pub fn x(&self, v: f64) -> Lag {
        self.x_at(self.t, v)
    }

    pub fn state(&self, v: f64) -> State {
        State::alive(self.x(v), self.y)
    }

    /// Moves the particle to `other`'s position without changing the clock.
    pub fn copy_position(&mut self, other: &Walker, v: f64) {
        let x = other.x_at(self.t, v);
        self.x_anchor = x;
        self.t_anchor = self.t;
        self.y = other.y;
    }

    /// Advances by at most `h`, stopping early at a jump or an exit.
    pub fn micro_step(&mut self, h: f64, eng: &Engine, stream: &mut Stream) -> Result<StepOutcome> {
        let params = eng.params;
        let v = params.v;
        let alpha = eng.cfg.substep_alpha;
        let x0 = self.x(v);
        let s_x = lag_exit_time(&x0, v, eng.kill_radius);
        if s_x <= 0.0 {
            return Ok(StepOutcome::Exited(Exit {
                kind: eng.x_kind,
                time: self.t,
            }));
        }
        let h_eff = h.min(s_x);

        let mut path = YPath::new();
        path.push((0.0, self.y));
        let mut s = 0.0;
        let mut yc = self.y;
        let mut y_exit: Option<(f64, ExitKind)> = None;
        while s < h_eff {
            let r = params.r(&x0.drifted(v * s));
            let dt = substep_size(h_eff - s, yc, r, eng.gamma, alpha);
            let y1 = yc + params.psi_raw(r, yc) * dt + dt.sqrt() * stream.normal();
            if !y1.is_finite() {
                return Err(Error::Numeric(format!(
                    "size became {y1} at t = {} from y = {yc}",
                    self.t + s
                )));
            }
            let u = stream.uniform();
            if let Some((at, level, kind)) = Self::barrier_crossing(eng, yc, y1, dt, u) {
                let te = s + at;
                path.push((te, level));
                y_exit = Some((te, kind));
                break;
            }
            s += dt;
            yc = y1;
            path.push((s, yc));
        }

        let end = y_exit.map_or(h_eff, |(te, _)| te);
        let (anchor, t_anchor, t_now) = (self.x_anchor, self.t_anchor, self.t);
        let x_at = |e: f64| anchor.drifted(v * ((t_now + e) - t_anchor));
        if let Some(jp) = thin_over_path(x_at, &path, end, stream, params) {
            let t_jump = self.t + jp.at;
            let x_pre = x_at(jp.at);
            let x_post = x_pre.plus(&jp.w);
            self.x_anchor = x_post;
            self.t_anchor = t_jump;
            self.t = t_jump;
            self.y = jp.y;
            let ev = JumpEvent {
                t: t_jump,
                w: jp.w,
                x_pre,
                x_post,
                y: jp.y,
            };
            if x_post.norm() >= eng.kill_radius {
                return Ok(StepOutcome::JumpedOut(
                    ev,
                    Exit {
                        kind: eng.x_kind,
                        time: t_jump,
                    },
                ));
            }
            return Ok(StepOutcome::Jumped(ev));
        }
        if let Some((te, kind)) = y_exit {
            self.t += te;
            self.y = path.last().map_or(self.y, |p| p.1);
            return Ok(StepOutcome::Exited(Exit { kind, time: self.t }));
        }
        self.t += h_eff;
        self.y = yc;
        if s_x <= h {
            return Ok(StepOutcome::Exited(Exit {
                kind: eng.x_kind,
                time: self.t,
            }));
        }
        Ok(StepOutcome::Moved)
    }

    /// Detects a barrier crossing over one Euler substep, either by the endpoint or
    /// by the Brownian bridge between the endpoints.
    #[inline]
    fn barrier_crossing(eng: &Engine, y0: f64, y1: f64, dt: f64, u: f64) -> Option<(f64, f64, ExitKind)> {
        let lo = eng.y_lo;
        if y1 <= lo {
            return Some((dt * (y0 - lo) / (y0 - y1), lo, eng.y_lo_kind));
        }
        let hi = eng.y_hi;
        if y1 >= hi {
            return Some((dt * (hi - y0) / (y1 - y0), hi, ExitKind::LeftTruncation));
        }
        // one uniform serves both barriers: low end for the floor, high end for the ceiling
        let (a, b) = (y0 - lo, y1 - lo);
        if u < (-2.0 * a * b / dt).exp() {
            return Some((dt * a / (a + b), lo, eng.y_lo_kind));
        }
        if hi.is_finite() {
            let (a, b) = (hi - y0, hi - y1);
            if 1.0 - u < (-2.0 * a * b / dt).exp() {
                return Some((dt * a / (a + b), hi, ExitKind::LeftTruncation));
            }
        }
        None
    }

    /// Runs micro-steps until `t_target` or an exit; jumps are reported to `on_jump`.
    pub fn advance<F: FnMut(&JumpEvent)>(
        &mut self,
        t_target: f64,
        eng: &Engine,
        stream: &mut Stream,
        mut on_jump: F,
    ) -> Result<Option<Exit>> {
        loop {
            let rem = t_target - self.t;
            if rem <= 1e-12 * t_target.abs().max(1.0) {
                self.t = t_target;
                return Ok(None);
            }
            match self.micro_step(rem.min(eng.cfg.dt_max), eng, stream)? {
                StepOutcome::Moved => {}
                StepOutcome::Jumped(ev) => on_jump(&ev),
                StepOutcome::Exited(exit) => return Ok(Some(exit)),
                StepOutcome::JumpedOut(ev, exit) => {
                    on_jump(&ev);
                    return Ok(Some(exit));
                }
            }
        }
    }
}

fn check_init(init: &State, eng: &Engine) -> Result<()> {
    if !init.is_alive() {
        return Err(Error::Domain("initial state is absorbed".into()));
    }
    if init.x.dim() != eng.params.dim {
        return Err(Error::Domain(format!(
            "initial lag has dimension {}, model has {}",
            init.x.dim(),
            eng.params.dim
        )));
    }
    if !eng.contains(&init.x, init.y) {
        return Err(Error::Domain(format!(
            "initial state ({:?}, {}) is outside the simulation domain",
            init.x, init.y
        )));
    }
    Ok(())
}

/// Simulates one trajectory up to the horizon or the first exit.
pub fn simulate_path(init: &State, cfg: &SimConfig, stream: &mut Stream, params: &ModelParams) -> Result<Trajectory> {
    let eng = Engine::new(params, cfg)?;
    check_init(init, &eng)?;
    let v = params.v;
    let mut traj = Trajectory::start(init.x, init.y, 0.0, v);
    let mut walker = Walker::new(init.x, init.y, 0.0);
    let every = cfg.record_every.unwrap_or(cfg.dt_max);
    let n_samples = (cfg.horizon / every).ceil() as usize;
    for k in 1..=n_samples {
        let t_k = (k as f64 * every).min(cfg.horizon);
        let jumps = &mut traj.jumps;
        match walker.advance(t_k, &eng, stream, |ev| jumps.push(*ev)) {
            Ok(None) => traj.samples.push(Sample {
                t: t_k,
                x: walker.x(v),
                y: walker.y,
            }),
            Ok(Some(exit)) => {
                traj.samples.push(Sample {
                    t: exit.time,
                    x: walker.x(v),
                    y: walker.y,
                });
                traj.exit = exit;
                return Ok(traj);
            }
            Err(e) => {
                let time = walker.t;
                traj.exit = Exit {
                    kind: ExitKind::SurvivedHorizon,
                    time,
                };
                return Err(Error::PathNumeric {
                    time,
                    message: e.to_string(),
                    partial: Box::new(traj),
                });
            }
        }
    }
    traj.exit = Exit {
        kind: ExitKind::SurvivedHorizon,
        time: cfg.horizon,
    };
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    /// Macro-step of the discrete h-transform.
    pub delta: f64,
    /// Cap on candidates per macro-step.
    pub max_tries: u64,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            delta: 0.05,
            max_tries: 1_000_000,
        }
    }
}

/// Q-process path by rejection per macro-step: a candidate move over `delta` of
/// the killed dynamics is accepted with probability `eta(candidate) / max eta`.
/// `lambda_hat` only enters the returned diagnostics.
pub fn simulate_q_path(
    init: &State,
    cfg: &SimConfig,
    qcfg: &QConfig,
    eta: &GridFn,
    stream: &mut Stream,
    params: &ModelParams,
) -> Result<Trajectory> {
    let eng = Engine::new(params, cfg)?;
    check_init(init, &eng)?;
    if !(qcfg.delta > 0.0) {
        return Err(Error::param("delta", "must be positive"));
    }
    let eta_max = eta.max();
    if !(eta_max > 0.0) || !eta_max.is_finite() {
        return Err(Error::Domain("eta grid has no positive value".into()));
    }
    let v = params.v;
    if !(eta.eval(&init.x, init.y) > 0.0) {
        return Err(Error::Domain(format!(
            "eta vanishes at the initial state ({:?}, {}); grid too small",
            init.x, init.y
        )));
    }
    let mut traj = Trajectory::start(init.x, init.y, 0.0, v);
    let mut stats = QStats::default();
    let mut current = Walker::new(init.x, init.y, 0.0);
    let steps = (cfg.horizon / qcfg.delta).round().max(1.0) as usize;
    let mut seg_jumps: Vec<JumpEvent> = Vec::new();
    for k in 1..=steps {
        let t_k = k as f64 * qcfg.delta;
        let mut tries = 0u64;
        let next = loop {
            if tries >= qcfg.max_tries {
                traj.q_stats = Some(stats);
                return Err(Error::NoConvergence {
                    iterations: tries as usize,
                    detail: format!(
                        "no candidate accepted at t = {} from ({:?}, {})",
                        current.t,
                        current.x(v),
                        current.y
                    ),
                });
            }
            tries += 1;
            stats.candidates += 1;
            let mut cand = current;
            seg_jumps.clear();
            let exit = cand.advance(t_k, &eng, stream, |ev| seg_jumps.push(*ev))?;
            if exit.is_some() {
                stats.killed += 1;
                continue;
            }
            let x = cand.x(v);
            let h = eta.eval(&x, cand.y);
            if stream.uniform() * eta_max < h {
                break cand;
            }
        };
        stats.accepted += 1;
        traj.jumps.extend_from_slice(&seg_jumps);
        current = next;
        let x = current.x(v);
        if !(eta.eval(&x, current.y) > 0.0) {
            return Err(Error::Domain(format!(
                "eta vanishes at visited state ({x:?}, {})",
                current.y
            )));
        }
        traj.samples.push(Sample {
            t: t_k,
            x,
            y: current.y,
        });
    }
    traj.exit = Exit {
        kind: ExitKind::SurvivedHorizon,
        time: steps as f64 * qcfg.delta,
    };
    traj.q_stats = Some(stats);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FixationFamily, GrowthSpec, MutationSpec};
    use crate::rng::StreamKey;
    use crate::stats::{chi_square_sf, mean_var};

    fn advantageous() -> ModelParams {
        let mut p = ModelParams::default_d1();
        p.fixation.family = FixationFamily::AdvantageousOnly;
        p
    }

    #[test]
    fn euler_step_examples() {
        let mut p = ModelParams::default_d1();
        p.growth = GrowthSpec::Quadratic { r0: 1.0, a: 0.5 };
        p.gamma_n = 1.0;
        let cfg = SimConfig::default();
        let y = step_y(2.0, &[0.0], 0.01, || 0.0, &p, &cfg).unwrap();
        assert_eq!(y, YStep::Alive(2.0 - 0.0025));

        // psi = 0 at y = 2 when r(x) y/2 = 1/(2y) + gamma y^3, i.e. r = 1/4 + 8 gamma
        let r_zero = 0.25 + 8.0 * p.gamma();
        p.growth = GrowthSpec::Quadratic { r0: r_zero, a: 0.5 };
        assert!(p.drift_psi(&[0.0], 2.0).unwrap().abs() < 1e-15);
        let y = step_y(2.0, &[0.0], 0.01, || 0.7, &p, &cfg).unwrap();
        match y {
            YStep::Alive(v) => assert!((v - (2.0 + 0.1 * 0.7)).abs() < 1e-14),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_y_reports_extinction() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig::default();
        match step_y(0.01, &[0.0], 0.01, || -3.0, &p, &cfg).unwrap() {
            YStep::Extinct { at } => assert!(at > 0.0 && at <= 0.01),
            other => panic!("{other:?}"),
        }
        assert!(step_y(1e-4, &[0.0], 0.01, || 0.0, &p, &cfg).is_err());
    }

    #[test]
    fn comparison_process_refinement() {
        // E[Y_t] under the constant-growth comparison drift, step dt vs dt/10.
        let mut p = ModelParams::default_d1();
        p.growth = GrowthSpec::Quadratic {
            r0: p.growth.sup(),
            a: 0.0,
        };
        p.mutation.mass = 0.0;
        let mean_at = |dt: f64, seed: u64| {
            let cfg = SimConfig {
                dt_max: dt,
                horizon: 1.0,
                ..SimConfig::default()
            };
            let n = 4000;
            let ys: Vec<f64> = (0..n)
                .map(|i| {
                    let mut s = StreamKey::new(seed, &[i]).stream();
                    let tr = simulate_path(&State::alive(Lag::scalar(0.0), 2.0), &cfg, &mut s, &p).unwrap();
                    if tr.exit.kind == ExitKind::SurvivedHorizon {
                        tr.final_sample().y
                    } else {
                        0.0
                    }
                })
                .collect();
            mean_var(&ys)
        };
        let (m1, v1) = mean_at(0.02, 1);
        let (m2, v2) = mean_at(0.002, 2);
        let se = (v1 / 4000.0 + v2 / 4000.0).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se, "{m1} vs {m2} (se {se})");
    }

    #[test]
    fn no_jumps_where_g_vanishes() {
        let p = advantageous();
        // at x = 0 no jump decreases the norm
        let state = State::alive(Lag::scalar(0.0), 3.0);
        let mut s = StreamKey::root(11).stream();
        for _ in 0..10_000 {
            assert!(try_jump(&state, 0.1, &mut s, &p).is_none());
        }
    }

    #[test]
    fn acceptance_rate_matches_bound_when_g_is_constant() {
        let mut p = ModelParams::default_d1();
        // s = 0 makes g = g_max / 2 everywhere
        p.fixation.s = 0.0;
        let y = 2.0;
        let dt = 0.01;
        let state = State::alive(Lag::scalar(0.3), y);
        let n = 100_000;
        let mut s = StreamKey::root(12).stream();
        let hits = (0..n).filter(|_| try_jump(&state, dt, &mut s, &p).is_some()).count();
        let rate = p.f(y) * 0.5 * p.mutation.mass;
        let prob = 1.0 - (-rate * dt).exp();
        let se = (prob * (1.0 - prob) / n as f64).sqrt();
        let emp = hits as f64 / n as f64;
        assert!((emp - prob).abs() < 4.0 * se, "{emp} vs {prob}");
    }

    #[test]
    fn accepted_jump_law_matches_quadrature() {
        let p = ModelParams::default_d1();
        let x = 0.8;
        let state = State::alive(Lag::scalar(x), 2.0);
        let mut s = StreamKey::root(13).stream();
        let mut ws = Vec::new();
        while ws.len() < 20_000 {
            if let Some(j) = try_jump(&state, 1e-3, &mut s, &p) {
                ws.push(j.w[0]);
            }
        }
        // 20 equiprobable-ish bins on [-2, 2] plus tails
        let edges: Vec<f64> = (0..=20).map(|i| -2.0 + 0.2 * i as f64).collect();
        let total = p.fixation_integral(&[x]);
        let cell_mass = |a: f64, b: f64| {
            let n = 2000;
            let h = (b - a) / n as f64;
            (0..n)
                .map(|i| {
                    let w = [a + (i as f64 + 0.5) * h];
                    p.g(&[x], &w) * p.mutation.density(&w) * h
                })
                .sum::<f64>()
                / total
        };
        let mut chi2 = 0.0;
        let mut dof = 0;
        let n = ws.len() as f64;
        let mut bins: Vec<(f64, f64)> = vec![(f64::NEG_INFINITY, -2.0)];
        bins.extend(edges.windows(2).map(|e| (e[0], e[1])));
        bins.push((2.0, f64::INFINITY));
        for (a, b) in bins {
            let pr = cell_mass(a.max(-8.0), b.min(8.0));
            let obs = ws.iter().filter(|&&w| w >= a && w < b).count() as f64;
            if pr * n >= 5.0 {
                chi2 += (obs - pr * n).powi(2) / (pr * n);
                dof += 1;
            }
        }
        let pval = chi_square_sf(chi2, dof - 1);
        assert!(pval > 0.01, "chi2 {chi2} dof {dof} p {pval}");
    }

    #[test]
    fn lag_is_affine_without_mutations() {
        let mut p = ModelParams::default_d1();
        p.mutation = MutationSpec::gaussian(0.0, 0.5);
        p.growth = GrowthSpec::Quadratic { r0: 1.0, a: 5.0 };
        let cfg = SimConfig {
            horizon: 200.0,
            record_every: Some(0.1),
            ..SimConfig::default()
        };
        for seed in 0..100 {
            let mut s = StreamKey::root(seed).stream();
            let tr = simulate_path(&State::alive(Lag::scalar(0.3), 1.0), &cfg, &mut s, &p).unwrap();
            assert_eq!(tr.exit.kind, ExitKind::Extinct, "seed {seed}");
            assert!(tr.jumps.is_empty());
            for smp in &tr.samples {
                assert_eq!(smp.x[0], 0.3 - p.v * smp.t);
            }
        }
    }

    #[test]
    fn advantageous_paths_respect_lag_bound() {
        let p = advantageous();
        let cfg = SimConfig {
            horizon: 20.0,
            ..SimConfig::default()
        };
        let x0 = 1.5;
        let mut n_jumps = 0;
        for seed in 0..40 {
            let mut s = StreamKey::root(seed).stream();
            let tr = simulate_path(&State::alive(Lag::scalar(x0), 3.0), &cfg, &mut s, &p).unwrap();
            for j in &tr.jumps {
                assert!(j.x_post.norm() < j.x_pre.norm());
                n_jumps += 1;
            }
            // the bound holds until the lag first reaches zero
            for smp in tr.samples.iter().take_while(|smp| smp.x[0] > 0.0) {
                assert!(smp.x[0] <= x0 - p.v * smp.t + 1e-12);
            }
        }
        assert!(n_jumps > 50);
    }

    #[test]
    fn reconstruction_is_bit_exact() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig {
            horizon: 20.0,
            record_every: Some(0.05),
            ..SimConfig::default()
        };
        let mut s = StreamKey::root(21).stream();
        let tr = simulate_path(&State::alive(Lag::scalar(0.0), 4.0), &cfg, &mut s, &p).unwrap();
        assert!(!tr.jumps.is_empty());
        for smp in &tr.samples {
            assert_eq!(tr.reconstruct_x(smp.t)[0], smp.x[0]);
        }
    }

    #[test]
    fn truncated_path_is_a_prefix() {
        let p = ModelParams::default_d1();
        let free = SimConfig {
            horizon: 30.0,
            ..SimConfig::default()
        };
        let trunc = free.with_truncation(4.0);
        let trunc = SimConfig {
            x_max: free.x_max,
            ..trunc
        };
        let init = State::alive(Lag::scalar(0.0), 2.0);
        for seed in 0..20 {
            let a = simulate_path(&init, &free, &mut StreamKey::root(seed).stream(), &p).unwrap();
            let b = simulate_path(&init, &trunc, &mut StreamKey::root(seed).stream(), &p).unwrap();
            assert!(b.samples.len() <= a.samples.len());
            let n = b.samples.len() - 1;
            assert_eq!(&a.samples[..n], &b.samples[..n]);
            if b.exit.kind == ExitKind::LeftTruncation {
                assert!(b.exit.time <= a.exit.time);
            }
        }
    }

    #[test]
    fn csv_has_expected_columns() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig {
            horizon: 2.0,
            record_every: Some(0.5),
            ..SimConfig::default()
        };
        let mut s = StreamKey::root(1).stream();
        let tr = simulate_path(&State::alive(Lag::scalar(0.0), 4.0), &cfg, &mut s, &p).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, 1.0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,y,n,event,w_1");
        assert!(lines.all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn constant_eta_gives_surviving_dynamics() {
        let p = ModelParams::default_d1();
        let cfg = SimConfig {
            horizon: 1.0,
            ..SimConfig::default()
        }
        .with_truncation(4.0);
        let b = crate::grid::Binning::truncation_box(1, 4.0, 8, 6).unwrap();
        let eta = GridFn::constant(b, 2.0);
        let init = State::alive(Lag::scalar(0.0), 2.0);
        let mut s = StreamKey::root(5).stream();
        let tr = simulate_q_path(&init, &cfg, &QConfig::default(), &eta, &mut s, &p).unwrap();
        let st = tr.q_stats.unwrap();
        assert_eq!(st.accepted, 20);
        assert_eq!(st.candidates, st.accepted + st.killed);
    }
}
