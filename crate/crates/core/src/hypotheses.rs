//! Checker for the standing hypotheses on `(f, r, g, nu)`.
//!
//! Checks are analytic per built-in family; grid sampling confirms the pointwise
//! properties of `g` and supplies witnesses when something fails.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::model::{FixationFamily, GrowthSpec, Lag, ModelParams, MutationShape, MAX_DIM};
use crate::rng::StreamKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
    H5,
    H6,
    H7,
    H8,
    H9,
    H10,
    H11,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 11] = [
        Hypothesis::H1,
        Hypothesis::H2,
        Hypothesis::H3,
        Hypothesis::H4,
        Hypothesis::H5,
        Hypothesis::H6,
        Hypothesis::H7,
        Hypothesis::H8,
        Hypothesis::H9,
        Hypothesis::H10,
        Hypothesis::H11,
    ];

    pub fn summary(self) -> &'static str {
        match self {
            Hypothesis::H1 => "f is continuous on (0, inf)",
            Hypothesis::H2 => "r is locally Lipschitz",
            Hypothesis::H3 => "g is continuous, nonnegative and bounded on compact x-sets",
            Hypothesis::H4 => "nu has finite total mass",
            Hypothesis::H5 => "f(y) > 0 for y > 0",
            Hypothesis::H6 => "nu has a density bounded below on some annulus",
            Hypothesis::H7 => "r(x) -> -inf as |x| -> inf",
            Hypothesis::H8 => "g is positive",
            Hypothesis::H9 => "g > 0 exactly on improving jumps |x+w| < |x|",
            Hypothesis::H10 => "nu is absolutely continuous",
            Hypothesis::H11 => "normalized jump density g nu / int g nu is bounded on compact x-sets",
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{self:?}]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Satisfied,
    Violated,
    NotApplicable,
}

/// A point `(x, w)` (or just `x`) exhibiting a violation, with the offending value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub w: Option<Vec<f64>>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub id: Hypothesis,
    pub status: Status,
    pub detail: String,
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub dim: usize,
    pub checks: Vec<HypothesisCheck>,
}

impl HypothesisReport {
    pub fn get(&self, id: Hypothesis) -> &HypothesisCheck {
        self.checks
            .iter()
            .find(|c| c.id == id)
            .expect("every hypothesis is checked")
    }

    pub fn status(&self, id: Hypothesis) -> Status {
        self.get(id).status
    }

    fn ok(&self, id: Hypothesis) -> bool {
        self.status(id) != Status::Violated
    }

    /// Hypotheses required by the convergence theorem that fail: all of H1-H7,
    /// one of H8/H9, and H10-H11 when `d >= 2`.
    pub fn missing_requirements(&self) -> Vec<Hypothesis> {
        let mut missing: Vec<Hypothesis> = Hypothesis::ALL[..7].iter().copied().filter(|&h| !self.ok(h)).collect();
        if !self.ok(Hypothesis::H8) && !self.ok(Hypothesis::H9) {
            missing.push(if self.dim >= 2 { Hypothesis::H9 } else { Hypothesis::H8 });
        }
        for h in [Hypothesis::H10, Hypothesis::H11] {
            if !self.ok(h) {
                missing.push(h);
            }
        }
        missing
    }

    /// Whether the theorem's hypotheses hold (with H8 and H9 as alternatives).
    pub fn all_applicable_pass(&self) -> bool {
        self.missing_requirements().is_empty()
    }
}

impl fmt::Display for HypothesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = match c.status {
                Status::Satisfied => "satisfied",
                Status::Violated => "VIOLATED",
                Status::NotApplicable => "n/a",
            };
            write!(f, "{:<6} {:<10} {}", c.id.to_string(), status, c.detail)?;
            if let Some(w) = &c.witness {
                write!(f, " (witness x = {:?}", w.x)?;
                if let Some(ww) = &w.w {
                    write!(f, ", w = {ww:?}")?;
                }
                write!(f, ", value = {:e})", w.value)?;
            }
            writeln!(f)?;
        }
        let verdict = if self.all_applicable_pass() {
            "all required hypotheses hold".to_string()
        } else {
            let names: Vec<String> = self.missing_requirements().iter().map(|h| h.to_string()).collect();
            format!("missing: {}", names.join(" "))
        };
        writeln!(f, "verdict: {verdict}")
    }
}

/// Sampling box for the pointwise checks on `g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationGrid {
    pub points: usize,
    /// Half-width of the box in units of the model's characteristic scale.
    pub half_width_scale: f64,
    pub seed: u64,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        ValidationGrid {
            points: 10_000,
            half_width_scale: 4.0,
            seed: 0x5eed,
        }
    }
}

/// Length scale of the model: the mutation step, or the radius where `r` changes sign.
pub fn characteristic_scale(params: &ModelParams) -> f64 {
    let GrowthSpec::Quadratic { r0, a } = params.growth;
    let tau = params.mutation.tau;
    if a > 0.0 {
        tau.max((r0.abs() / a).sqrt())
    } else {
        tau.max(1.0)
    }
}

fn check(id: Hypothesis, status: Status, detail: impl Into<String>) -> HypothesisCheck {
    HypothesisCheck {
        id,
        status,
        detail: detail.into(),
        witness: None,
    }
}

fn violated(id: Hypothesis, detail: impl Into<String>, witness: Witness) -> HypothesisCheck {
    HypothesisCheck {
        id,
        status: Status::Violated,
        detail: detail.into(),
        witness: Some(witness),
    }
}

fn unit(dim: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = scale;
    v
}

pub fn validate(params: &ModelParams, grid: &ValidationGrid) -> HypothesisReport {
    let d = params.dim;
    let GrowthSpec::Quadratic { r0: _, a } = params.growth;
    let crate::model::ArrivalSpec::LinearInN { mu } = params.arrival;
    let fix = params.fixation;
    let nu = params.mutation;
    let mut checks = Vec::with_capacity(11);

    checks.push(check(
        Hypothesis::H1,
        Status::Satisfied,
        "f(y) = mu sigma^2 y^2 / 4 is polynomial",
    ));
    checks.push(check(Hypothesis::H2, Status::Satisfied, "r is a quadratic polynomial"));

    // Pointwise samples of g on the box.
    let half = grid.half_width_scale * characteristic_scale(params);
    let mut stream = StreamKey::new(grid.seed, &[0x4879]).stream();
    let mut neg_or_nan: Option<Witness> = None;
    let mut above_bound: Option<Witness> = None;
    let mut zero_g: Option<Witness> = None;
    let mut bad_sign: Option<Witness> = None;
    let mut g_sup_seen: f64 = 0.0;
    for _ in 0..grid.points {
        let mut x = Lag::zeros(d);
        let mut w = Lag::zeros(d);
        for k in 0..d {
            x[k] = stream.rng().random_range(-half..half);
            w[k] = stream.rng().random_range(-half..half);
        }
        let g = params.g(&x, &w);
        let witness = || Witness {
            x: x.to_vec(),
            w: Some(w.to_vec()),
            value: g,
        };
        if !(g >= 0.0) && neg_or_nan.is_none() {
            neg_or_nan = Some(witness());
        }
        let bound = params.g_bound(x.norm());
        if g > bound * (1.0 + 1e-12) && above_bound.is_none() {
            above_bound = Some(witness());
        }
        if g.is_finite() {
            g_sup_seen = g_sup_seen.max(g);
        }
        if g == 0.0 && zero_g.is_none() {
            zero_g = Some(witness());
        }
        let improving = x.plus(&w).norm_sq() < x.norm_sq();
        if (improving != (g > 0.0)) && bad_sign.is_none() {
            bad_sign = Some(witness());
        }
    }

    checks.push(if !(fix.g_max > 0.0) {
        violated(
            Hypothesis::H3,
            format!("g_max = {} leaves no admissible bound", fix.g_max),
            Witness {
                x: unit(d, 0.0),
                w: None,
                value: fix.g_max,
            },
        )
    } else if let Some(w) = neg_or_nan {
        violated(Hypothesis::H3, "g is negative or undefined at a sampled point", w)
    } else if let Some(w) = above_bound {
        violated(Hypothesis::H3, "g exceeds its bound at a sampled point", w)
    } else {
        check(
            Hypothesis::H3,
            Status::Satisfied,
            format!(
                "0 <= g <= g_sup on {} samples of [-{half:.3}, {half:.3}]^{}, largest value {g_sup_seen:.4}",
                grid.points,
                2 * d
            ),
        )
    });

    checks.push(check(
        Hypothesis::H4,
        Status::Satisfied,
        format!("nu(R^d) = {}", nu.mass),
    ));

    checks.push(if mu > 0.0 {
        check(Hypothesis::H5, Status::Satisfied, format!("mu = {mu} > 0"))
    } else {
        violated(
            Hypothesis::H5,
            format!("mu = {mu} makes f vanish or go negative"),
            Witness {
                x: vec![],
                w: None,
                value: params.f(1.0),
            },
        )
    });

    // The Gaussian density is radial and decreasing: its infimum on the annulus
    // B(S + dS) \ B(S - dS) is attained on the outer sphere.
    let (s_rad, ds) = (nu.tau, 0.5 * nu.tau);
    let outer = unit(d, s_rad + ds);
    let nu_min = nu.density(&outer);
    checks.push(if nu_min > 0.0 {
        check(
            Hypothesis::H6,
            Status::Satisfied,
            format!("nu_min = {nu_min:.4e} on the annulus S = {s_rad}, dS = {ds}"),
        )
    } else {
        violated(
            Hypothesis::H6,
            "nu has no mass to bound below",
            Witness {
                x: vec![],
                w: Some(outer),
                value: nu_min,
            },
        )
    });

    checks.push(if a > 0.0 {
        check(Hypothesis::H7, Status::Satisfied, format!("a = {a} > 0, r ~ -a |x|^2"))
    } else {
        let far = unit(d, 1e3);
        let value = params.r(&far);
        violated(
            Hypothesis::H7,
            format!("a = {a} <= 0: r stays bounded below at infinity"),
            Witness { x: far, w: None, value },
        )
    });

    match fix.family {
        FixationFamily::DeleteriousOk => {
            checks.push(match (fix.g_max > 0.0, zero_g) {
                (true, None) => check(Hypothesis::H8, Status::Satisfied, "logistic fixation is positive"),
                (_, Some(w)) => violated(Hypothesis::H8, "g vanishes at a sampled point", w),
                (false, None) => violated(
                    Hypothesis::H8,
                    "g_max <= 0",
                    Witness {
                        x: unit(d, 0.0),
                        w: None,
                        value: fix.g_max,
                    },
                ),
            });
            let x = unit(d, 1.0);
            let w = unit(d, 1.0);
            let value = params.g(&x, &w);
            checks.push(violated(
                Hypothesis::H9,
                "deleterious jumps fix with positive probability",
                Witness { x, w: Some(w), value },
            ));
        }
        FixationFamily::AdvantageousOnly => {
            let x = unit(d, 1.0);
            let w = unit(d, 1.0);
            let value = params.g(&x, &w);
            checks.push(violated(
                Hypothesis::H8,
                "g vanishes on non-improving jumps",
                Witness { x, w: Some(w), value },
            ));
            checks.push(if let Some(w) = bad_sign {
                violated(Hypothesis::H9, "g sign does not match |x+w| < |x|", w)
            } else if !(a > 0.0) || !(fix.s > 0.0) || !(fix.g_max > 0.0) {
                let x = unit(d, 1.0);
                let w = unit(d, -0.5);
                let value = params.g(&x, &w);
                violated(
                    Hypothesis::H9,
                    "improving jumps need a > 0, s > 0 and g_max > 0",
                    Witness { x, w: Some(w), value },
                )
            } else {
                check(
                    Hypothesis::H9,
                    Status::Satisfied,
                    format!("sign structure confirmed on {} samples", grid.points),
                )
            });
        }
    }

    checks.push(check(
        Hypothesis::H10,
        Status::Satisfied,
        match nu.shape {
            MutationShape::Gaussian => "Gaussian nu has a density",
            MutationShape::TiltedGaussian { .. } => "tilted Gaussian nu has a density",
        },
    ));

    checks.push(if d == 1 {
        check(Hypothesis::H11, Status::NotApplicable, "only needed when d >= 2")
    } else {
        h11_check(params, half)
    });

    HypothesisReport { dim: d, checks }
}

/// Scans `sup_w g(x, w) nu(w) / int g(x, .) nu` along a ray towards the origin.
fn h11_check(params: &ModelParams, half: f64) -> HypothesisCheck {
    let d = params.dim;
    let mut worst = (0.0f64, vec![0.0; d]);
    let radii: Vec<f64> = (0..13).map(|k| half * 0.5f64.powi(k)).collect();
    for &rad in &radii {
        let x = unit(d, rad);
        let denom = params.fixation_integral(&x);
        // densest jump is toward the origin for the built-ins
        let mut numer: f64 = 0.0;
        for k in 1..=64 {
            let mut w = [0.0; MAX_DIM];
            w[0] = -2.0 * rad * k as f64 / 65.0;
            numer = numer.max(params.g(&x, &w[..d]) * params.mutation.density(&w[..d]));
        }
        let ratio = if denom > 0.0 { numer / denom } else { f64::INFINITY };
        if ratio > worst.0 {
            worst = (ratio, x);
        }
    }
    match params.fixation.family {
        FixationFamily::DeleteriousOk if worst.0.is_finite() => check(
            Hypothesis::H11,
            Status::Satisfied,
            format!("density ratio bounded (largest sampled {:.4e})", worst.0),
        ),
        _ => violated(
            Hypothesis::H11,
            "normalized jump density blows up as x -> 0",
            Witness {
                x: worst.1,
                w: None,
                value: worst.0,
            },
        ),
    }
}
