//! Model parameterization: the lag/size system with its built-in function families.
//!
//! The lag `x` lives in `R^d` (`d <= 3`) and the size is carried in the
//! transformed coordinate `y = (2/sigma) sqrt(n)`, under which the size equation
//! has unit diffusion and drift
//!
//! ```text
//! psi(x, y) = -1/(2y) + r(x) y / 2 - gamma y^3,   gamma = gamma_n sigma^2 / 8.
//! ```
//!
//! Mutations of effect `w` are proposed from the finite measure `nu` and fix with
//! probability `g(x, w)`; their arrival is modulated by `f(y) = f_N(sigma^2 y^2 / 4)`.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite_normal, gauss_legendre_unit, Rule};

pub const MAX_DIM: usize = 3;

/// Default order of the Gauss-Hermite rule used against the mutation law.
pub const DEFAULT_QUAD_ORDER: usize = 64;

/// Phenotypic lag, a point of `R^d` with `d <= MAX_DIM`.
#[derive(Clone, Copy, PartialEq)]
pub struct Lag {
    coords: [f64; MAX_DIM],
    dim: u8,
}

impl Lag {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} out of range");
        Lag {
            coords: [0.0; MAX_DIM],
            dim: dim as u8,
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut lag = Lag::zeros(xs.len());
        lag.coords[..xs.len()].copy_from_slice(xs);
        lag
    }

    pub fn scalar(x: f64) -> Self {
        Lag::from_slice(&[x])
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self - shift * e_1`
    pub fn drifted(&self, shift: f64) -> Lag {
        let mut out = *self;
        out.coords[0] -= shift;
        out
    }

    pub fn plus(&self, w: &Lag) -> Lag {
        debug_assert_eq!(self.dim, w.dim);
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] += w.coords[i];
        }
        out
    }
}

impl Deref for Lag {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords[..self.dim as usize]
    }
}

impl DerefMut for Lag {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.coords[..self.dim as usize]
    }
}

impl fmt::Debug for Lag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

impl Serialize for Lag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for Lag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom(format!(
                "lag must have 1..={MAX_DIM} coordinates"
            )));
        }
        Ok(Lag::from_slice(&v))
    }
}

/// A point of the state space, or the cemetery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub x: Lag,
    pub y: f64,
    pub absorbed: bool,
}

impl State {
    pub fn alive(x: Lag, y: f64) -> Self {
        State { x, y, absorbed: false }
    }

    /// The `(0, 0)` sentinel used after extinction.
    pub fn absorbed(dim: usize) -> Self {
        State {
            x: Lag::zeros(dim),
            y: 0.0,
            absorbed: true,
        }
    }

    pub fn is_alive(&self) -> bool {
        !self.absorbed
    }
}

/// `y = (2/sigma) sqrt(n)`.
pub fn n_to_y(n: f64, sigma: f64) -> Result<f64> {
    if !(n >= 0.0) {
        return Err(Error::Domain(format!("population size must be >= 0, got {n}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(2.0 / sigma * n.sqrt())
}

/// Inverse of [`n_to_y`]: `n = sigma^2 y^2 / 4`.
pub fn y_to_n(y: f64, sigma: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::Domain(format!("transformed size must be >= 0, got {y}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let half = 0.5 * sigma * y;
    Ok(half * half)
}

/// Growth rate `r(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GrowthSpec {
    /// `r(x) = r0 - a |x|^2`
    Quadratic { r0: f64, a: f64 },
}

impl GrowthSpec {
    #[inline]
    pub fn rate(&self, x: &[f64]) -> f64 {
        match *self {
            GrowthSpec::Quadratic { r0, a } => r0 - a * x.iter().map(|c| c * c).sum::<f64>(),
        }
    }

    /// `sup_x r(x)`, infinite when the family is unbounded above.
    pub fn sup(&self) -> f64 {
        match *self {
            GrowthSpec::Quadratic { r0, a } if a >= 0.0 => r0,
            GrowthSpec::Quadratic { .. } => f64::INFINITY,
        }
    }
}

/// Mutant arrival rate `f_N(n)` as a function of the population size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArrivalSpec {
    /// `f_N(n) = mu n`
    LinearInN { mu: f64 },
}

impl ArrivalSpec {
    pub fn rate_in_n(&self, n: f64) -> f64 {
        match *self {
            ArrivalSpec::LinearInN { mu } => mu * n,
        }
    }

    /// `f(y) = f_N(sigma^2 y^2 / 4)`.
    #[inline]
    pub fn rate(&self, y: f64, sigma: f64) -> f64 {
        match *self {
            ArrivalSpec::LinearInN { mu } => 0.25 * mu * sigma * sigma * y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixationFamily {
    /// `g = g_max * logistic(s [r(x+w) - r(x)])`, positive everywhere.
    DeleteriousOk,
    /// `g = g_max * (1 - exp(-s [r(x+w) - r(x)]))` when `|x+w| < |x|`, else 0.
    AdvantageousOnly,
}

/// Fixation probability `g(x, w)`.
///
/// With `rescaled` set, `g` is divided by `|w| ^ 1` (paired with a mutation law
/// multiplied by the same factor, see [`rescale_fixation`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationSpec {
    pub family: FixationFamily,
    pub g_max: f64,
    pub s: f64,
    #[serde(default)]
    pub rescaled: bool,
}

impl FixationSpec {
    #[inline]
    fn unscaled(&self, growth: &GrowthSpec, x: &[f64], w: &[f64]) -> f64 {
        let mut moved = [0.0; MAX_DIM];
        let mut nx = 0.0;
        let mut nm = 0.0;
        for i in 0..x.len() {
            moved[i] = x[i] + w[i];
            nx += x[i] * x[i];
            nm += moved[i] * moved[i];
        }
        match self.family {
            FixationFamily::DeleteriousOk => {
                let dr = growth.rate(&moved[..x.len()]) - growth.rate(x);
                self.g_max / (1.0 + (-self.s * dr).exp())
            }
            FixationFamily::AdvantageousOnly => {
                if nm < nx {
                    let dr = growth.rate(&moved[..x.len()]) - growth.rate(x);
                    (self.g_max * (-(-self.s * dr).exp_m1())).max(0.0)
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn value(&self, growth: &GrowthSpec, x: &[f64], w: &[f64]) -> f64 {
        let g = self.unscaled(growth, x, w);
        if self.rescaled {
            let wn = w.iter().map(|c| c * c).sum::<f64>().sqrt();
            if g == 0.0 {
                0.0
            } else {
                g / wn.min(1.0)
            }
        } else {
            g
        }
    }

    /// Upper bound of `g(x, .)` over all `w`, valid for every `x` with `|x| <= x_norm`.
    pub fn bound(&self, growth: &GrowthSpec, x_norm: f64) -> f64 {
        if !self.rescaled {
            return self.g_max;
        }
        // 1 - e^{-z} <= z and |x|^2 - |x+w|^2 <= 2|x||w| give g <= 2 g_max s a |x| |w|.
        let a = match *growth {
            GrowthSpec::Quadratic { a, .. } => a.max(0.0),
        };
        self.g_max * (2.0 * self.s * a * x_norm).max(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum MutationShape {
    /// `nu(dw) = mass N(0, tau^2 I)(w) dw`
    Gaussian,
    /// `nu(dw) = base_mass (|w| ^ 1) N(0, tau^2 I)(w) dw`
    TiltedGaussian { base_mass: f64 },
}

/// The mutation measure `nu`, finite with total mass `mass`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub mass: f64,
    pub tau: f64,
    #[serde(flatten)]
    pub shape: MutationShape,
}

impl MutationSpec {
    pub fn gaussian(mass: f64, tau: f64) -> Self {
        MutationSpec {
            mass,
            tau,
            shape: MutationShape::Gaussian,
        }
    }

    /// Multiplicative factor of the density relative to the Gaussian shape.
    #[inline]
    pub fn tilt(&self, w: &[f64]) -> f64 {
        match self.shape {
            MutationShape::Gaussian => 1.0,
            MutationShape::TiltedGaussian { .. } => w.iter().map(|c| c * c).sum::<f64>().sqrt().min(1.0),
        }
    }

    /// Mass carried by the Gaussian factor (`mass` for the plain shape).
    pub fn gaussian_mass(&self) -> f64 {
        match self.shape {
            MutationShape::Gaussian => self.mass,
            MutationShape::TiltedGaussian { base_mass } => base_mass,
        }
    }

    /// Lebesgue density of `nu` at `w`.
    pub fn density(&self, w: &[f64]) -> f64 {
        let d = w.len() as i32;
        let t2 = self.tau * self.tau;
        let q: f64 = w.iter().map(|c| c * c).sum();
        let gauss = (-0.5 * q / t2).exp() / (2.0 * std::f64::consts::PI * t2).powf(0.5 * d as f64);
        self.gaussian_mass() * self.tilt(w) * gauss
    }
}

/// `E[|W| ^ 1]` for `W ~ N(0, tau^2)` in one dimension.
pub fn expected_clipped_abs(tau: f64) -> f64 {
    let u = 1.0 / tau;
    tau * (2.0 / std::f64::consts::PI).sqrt() * (-(-0.5 * u * u).exp_m1())
        + statrs::function::erf::erfc(u / 2f64.sqrt())
}

#[derive(Debug)]
struct QuadRules {
    order: usize,
    hermite: Rule,
    hermite_half: Rule,
    legendre: Rule,
}

impl QuadRules {
    fn new(order: usize) -> Self {
        QuadRules {
            order,
            hermite: gauss_hermite_normal(order),
            hermite_half: gauss_hermite_normal((order / 2).max(2)),
            legendre: gauss_legendre_unit(order),
        }
    }
}

/// Jump intensity at a point: the exact rate and the thinning bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpIntensity {
    /// `f(y) int g(x, w) nu(dw)`
    pub total: f64,
    /// `f(y) g_sup nu(R^d)`
    pub bound: f64,
}

/// Full model parameterization.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dim: usize,
    pub v: f64,
    pub sigma: f64,
    pub gamma_n: f64,
    pub growth: GrowthSpec,
    pub arrival: ArrivalSpec,
    pub fixation: FixationSpec,
    pub mutation: MutationSpec,
    rules: Arc<QuadRules>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.v == other.v
            && self.sigma == other.sigma
            && self.gamma_n == other.gamma_n
            && self.growth == other.growth
            && self.arrival == other.arrival
            && self.fixation == other.fixation
            && self.mutation == other.mutation
            && self.rules.order == other.rules.order
    }
}

impl ModelParams {
    /// Builds a parameter set. Only structure is checked here (dimension, finiteness,
    /// positivity of sigma); whether the hypotheses hold is the job of
    /// [`ModelParams::validate_hypotheses`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        v: f64,
        sigma: f64,
        gamma_n: f64,
        growth: GrowthSpec,
        arrival: ArrivalSpec,
        fixation: FixationSpec,
        mutation: MutationSpec,
    ) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::param("dim", format!("must be in 1..={MAX_DIM}, got {dim}")));
        }
        let scalars = [
            ("v", v),
            ("sigma", sigma),
            ("gamma_n", gamma_n),
            ("g_max", fixation.g_max),
            ("s", fixation.s),
            ("m_nu", mutation.mass),
            ("tau", mutation.tau),
        ];
        for (name, value) in scalars {
            if !value.is_finite() {
                return Err(Error::param(name, format!("must be finite, got {value}")));
            }
        }
        let GrowthSpec::Quadratic { r0, a } = growth;
        let ArrivalSpec::LinearInN { mu } = arrival;
        for (name, value) in [("r0", r0), ("a", a), ("mu", mu)] {
            if !value.is_finite() {
                return Err(Error::param(name, format!("must be finite, got {value}")));
            }
        }
        if !(sigma > 0.0) {
            return Err(Error::param("sigma", "must be > 0"));
        }
        if !(mutation.tau > 0.0) {
            return Err(Error::param("tau", "must be > 0"));
        }
        if mutation.mass < 0.0 {
            return Err(Error::param("m_nu", "must be >= 0"));
        }
        Ok(ModelParams {
            dim,
            v,
            sigma,
            gamma_n,
            growth,
            arrival,
            fixation,
            mutation,
            rules: Arc::new(QuadRules::new(DEFAULT_QUAD_ORDER)),
        })
    }

    /// The default one-dimensional configuration used throughout the test suite.
    pub fn default_d1() -> Self {
        ModelParams::new(
            1,
            0.2,
            1.0,
            0.1,
            GrowthSpec::Quadratic { r0: 2.0, a: 0.5 },
            ArrivalSpec::LinearInN { mu: 1.0 },
            FixationSpec {
                family: FixationFamily::DeleteriousOk,
                g_max: 1.0,
                s: 2.0,
                rescaled: false,
            },
            MutationSpec::gaussian(1.0, 0.5),
        )
        .expect("default parameters are well formed")
    }

    pub fn with_quad_order(mut self, order: usize) -> Result<Self> {
        if order < 4 {
            return Err(Error::param("quad_order", "must be >= 4"));
        }
        self.rules = Arc::new(QuadRules::new(order));
        Ok(self)
    }

    pub fn quad_order(&self) -> usize {
        self.rules.order
    }

    /// `gamma = gamma_n sigma^2 / 8`, always recomputed from its inputs.
    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma_n * self.sigma * self.sigma / 8.0
    }

    #[inline]
    pub fn r(&self, x: &[f64]) -> f64 {
        self.growth.rate(x)
    }

    #[inline]
    pub fn f(&self, y: f64) -> f64 {
        self.arrival.rate(y, self.sigma)
    }

    #[inline]
    pub fn g(&self, x: &[f64], w: &[f64]) -> f64 {
        self.fixation.value(&self.growth, x, w)
    }

    /// `g_sup` valid on the ball of radius `x_norm`.
    #[inline]
    pub fn g_bound(&self, x_norm: f64) -> f64 {
        self.fixation.bound(&self.growth, x_norm)
    }

    /// Drift of the transformed size without the domain check.
    #[inline]
    pub(crate) fn psi_raw(&self, r: f64, y: f64) -> f64 {
        -0.5 / y + 0.5 * r * y - self.gamma() * y * y * y
    }

    /// `psi(x, y) = -1/(2y) + r(x) y/2 - gamma y^3`.
    pub fn drift_psi(&self, x: &[f64], y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!(
                "drift is singular at the boundary, need y > 0 (got {y})"
            )));
        }
        Ok(self.psi_raw(self.r(x), y))
    }

    /// Comparison drift with a constant growth rate `r_max`.
    pub fn drift_psi_upper(&self, r_max: f64, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("need y > 0 (got {y})")));
        }
        Ok(self.psi_raw(r_max, y))
    }

    /// Integrates `h(w) nu(dw)` with the configured rule, using `rule` for the Gaussian factor.
    fn integrate_with<F>(&self, rule: &Rule, mut h: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        let tau = self.mutation.tau;
        let mass = self.mutation.gaussian_mass();
        let n = rule.len();
        let mut w = [0.0; MAX_DIM];
        let mut idx = [0usize; MAX_DIM];
        let d = self.dim;
        let mut total = 0.0;
        loop {
            let mut weight = 1.0;
            for k in 0..d {
                w[k] = tau * rule.nodes[idx[k]];
                weight *= rule.weights[idx[k]];
            }
            let ww = &w[..d];
            total += weight * self.mutation.tilt(ww) * h(ww);
            // odometer over the tensor grid
            let mut k = 0;
            loop {
                if k == d {
                    return mass * total;
                }
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// `int h(w) nu(dw)` for a smooth integrand.
    pub fn integrate_nu<F>(&self, h: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        self.integrate_with(&self.rules.hermite, h)
    }

    /// Integrates `h(w) g(x, w) nu(dw)`; in one dimension the advantageous family is
    /// integrated by Gauss-Legendre over its support `(-2x, 0)`, where it is smooth.
    fn integrate_against_g<F>(&self, x: &[f64], coarse: bool, mut h: F) -> f64
    where
        F: FnMut(&[f64]) -> f64,
    {
        if self.dim == 1 && self.fixation.family == FixationFamily::AdvantageousOnly {
            let x0 = x[0];
            if x0 == 0.0 {
                return 0.0;
            }
            let (lo, hi) = if x0 > 0.0 { (-2.0 * x0, 0.0) } else { (0.0, -2.0 * x0) };
            let base = &self.rules.legendre;
            let step = if coarse { 2 } else { 1 };
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            let mut total = 0.0;
            if coarse {
                let r = gauss_legendre_unit((base.len() / 2).max(2));
                for (t, wt) in r.nodes.iter().zip(&r.weights) {
                    let w = [mid + half * t];
                    total += wt * half * self.g(x, &w) * self.mutation.density(&w) * h(&w);
                }
                return total;
            }
            for i in (0..base.len()).step_by(step) {
                let w = [mid + half * base.nodes[i]];
                total += base.weights[i] * half * self.g(x, &w) * self.mutation.density(&w) * h(&w);
            }
            return total;
        }
        let rule = if coarse {
            &self.rules.hermite_half
        } else {
            &self.rules.hermite
        };
        self.integrate_with(rule, |w| self.g(x, w) * h(w))
    }

    /// `int g(x, w) nu(dw)`.
    pub fn fixation_integral(&self, x: &[f64]) -> f64 {
        self.integrate_against_g(x, false, |_| 1.0)
    }

    /// `int w_1 g(x, w) nu(dw)`, the mean accepted displacement along `e_1` per unit arrival rate.
    pub fn displacement_integral(&self, x: &[f64]) -> f64 {
        self.integrate_against_g(x, false, |w| w[0])
    }

    /// Same as [`Self::displacement_integral`] with a half-order rule, for error estimates.
    pub fn displacement_integral_coarse(&self, x: &[f64]) -> f64 {
        self.integrate_against_g(x, true, |w| w[0])
    }

    /// Total jump rate and the proposal bound used by thinning.
    pub fn jump_intensity(&self, x: &[f64], y: f64) -> Result<JumpIntensity> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("jump intensity needs y > 0 (got {y})")));
        }
        let fy = self.f(y);
        let fine = self.fixation_integral(x);
        let coarse = self.integrate_against_g(x, true, |_| 1.0);
        if !fine.is_finite() || !coarse.is_finite() {
            return Err(Error::Numeric(format!(
                "fixation integral is not finite at x = {x:?} (fine {fine}, coarse {coarse})"
            )));
        }
        let scale = fine.abs().max(coarse.abs());
        if (fine - coarse).abs() > 1e-4 * scale + 1e-14 {
            return Err(Error::Numeric(format!(
                "quadrature did not converge at x = {x:?}: order {} gives {fine}, half order gives {coarse}",
                self.quad_order()
            )));
        }
        let xn = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(JumpIntensity {
            total: fy * fine,
            bound: fy * self.g_bound(xn) * self.mutation.mass,
        })
    }

    /// Carrying capacity in transformed size at lag `x` (zero when `r(x) <= 0`).
    pub fn carrying_capacity_y(&self, x: &[f64]) -> f64 {
        let r = self.r(x);
        if r <= 0.0 {
            0.0
        } else {
            (r / (2.0 * self.gamma())).sqrt()
        }
    }

    pub fn validate_hypotheses(&self) -> crate::hypotheses::HypothesisReport {
        crate::hypotheses::validate(self, &crate::hypotheses::ValidationGrid::default())
    }
}

/// Rewrites an advantageous-only model in the `(g / (|w| ^ 1), (|w| ^ 1) nu)` form.
///
/// The product `g nu` is unchanged pointwise, so the accepted-jump law and the jump
/// rate are identical; the rewritten pair is the one with a finite proposal measure.
pub fn rescale_fixation(params: &ModelParams) -> Result<ModelParams> {
    if params.dim != 1 {
        return Err(Error::Unsupported(format!(
            "the (|w| ^ 1) rescaling is implemented for d = 1, got d = {}",
            params.dim
        )));
    }
    if params.fixation.family != FixationFamily::AdvantageousOnly {
        return Err(Error::Unsupported(
            "rescaling requires the advantageous-only fixation family".into(),
        ));
    }
    if params.fixation.rescaled || params.mutation.shape != MutationShape::Gaussian {
        return Err(Error::Unsupported("model is already rescaled".into()));
    }
    let mut out = params.clone();
    let base_mass = params.mutation.mass;
    out.fixation.rescaled = true;
    out.mutation = MutationSpec {
        mass: base_mass * expected_clipped_abs(params.mutation.tau),
        tau: params.mutation.tau,
        shape: MutationShape::TiltedGaussian { base_mass },
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn advantageous() -> ModelParams {
        let mut p = ModelParams::default_d1();
        p.fixation.family = FixationFamily::AdvantageousOnly;
        p
    }

    #[test]
    fn n_to_y_examples() {
        assert_eq!(n_to_y(4.0, 2.0).unwrap(), 2.0);
        assert_eq!(n_to_y(0.0, 0.7).unwrap(), 0.0);
        for n in [0.1, 1.0, 7.3] {
            let back = y_to_n(n_to_y(n, 1.3).unwrap(), 1.3).unwrap();
            assert!((back - n).abs() <= 4.0 * f64::EPSILON * n);
        }
        assert!(matches!(n_to_y(-1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(y_to_n(-1e-9, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn coordinate_round_trip_on_log_grid() {
        for k in 0..100 {
            let n = 10f64.powf(-6.0 + 12.0 * k as f64 / 99.0);
            let back = y_to_n(n_to_y(n, 0.8).unwrap(), 0.8).unwrap();
            assert!(((back - n) / n).abs() < 1e-14, "n = {n}");
        }
    }

    #[test]
    fn drift_examples() {
        // r(x) = 1 at x = 0 with r0 = 1; gamma = 0.125 from gamma_n = 1, sigma = 1.
        let mut p = ModelParams::default_d1();
        p.growth = GrowthSpec::Quadratic { r0: 1.0, a: 0.5 };
        p.gamma_n = 1.0;
        assert_eq!(p.gamma(), 0.125);
        let psi = p.drift_psi(&[0.0], 2.0).unwrap();
        assert!((psi + 0.25).abs() < 1e-15);

        p.growth = GrowthSpec::Quadratic { r0: 0.0, a: 0.0 };
        p.gamma_n = 0.0;
        for y in [0.1, 1.0, 3.0] {
            assert_eq!(p.drift_psi(&[2.0], y).unwrap(), -0.5 / y);
        }
        assert!(matches!(p.drift_psi(&[0.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(p.drift_psi(&[0.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn drift_is_dominated_by_comparison_drift() {
        let p = ModelParams::default_d1();
        let r_max = p.growth.sup();
        for i in 1..200 {
            let y = i as f64 * 0.05;
            for j in -40..=40 {
                let x = j as f64 * 0.1;
                assert!(p.drift_psi(&[x], y).unwrap() <= p.drift_psi_upper(r_max, y).unwrap());
            }
        }
    }

    #[test]
    fn jump_intensity_vanishes_with_size() {
        let p = ModelParams::default_d1();
        let ji = p.jump_intensity(&[0.3], 1e-300).unwrap();
        assert!(ji.total < 1e-300);
    }

    #[test]
    fn saturated_fixation_reaches_the_bound() {
        // s = 0 makes the logistic constant 1/2: g = g_max / 2 everywhere.
        let mut p = ModelParams::default_d1();
        p.fixation.s = 0.0;
        p.fixation.g_max = 0.5;
        let ji = p.jump_intensity(&[1.0], 2.0).unwrap();
        let expected = p.f(2.0) * 0.25 * p.mutation.mass;
        assert!((ji.total - expected).abs() < 1e-13);
        // with g_max set to the constant value the bound is attained.
        let mut q = p.clone();
        q.fixation.g_max = 0.25;
        let jq = q.jump_intensity(&[1.0], 2.0).unwrap();
        assert!((jq.total * 2.0 - jq.bound).abs() < 1e-12 * jq.bound);
    }

    /// Midpoint rule on a wide uniform grid, independent of the Gauss rules.
    fn midpoint_fixation_integral(p: &ModelParams, x: f64) -> f64 {
        let half = 12.0 * p.mutation.tau;
        let n = 400_000;
        let h = 2.0 * half / n as f64;
        (0..n)
            .map(|i| {
                let w = [-half + (i as f64 + 0.5) * h];
                p.g(&[x], &w) * p.mutation.density(&w) * h
            })
            .sum()
    }

    #[test]
    fn fixation_integral_matches_midpoint_rule() {
        let p = ModelParams::default_d1();
        for x in [-2.5, -0.7, 0.0, 0.4, 1.9] {
            let gh = p.fixation_integral(&[x]);
            let mid = midpoint_fixation_integral(&p, x);
            assert!(((gh - mid) / mid).abs() < 1e-6, "x = {x}: {gh} vs {mid}");
            let ji = p.jump_intensity(&[x], 1.7).unwrap();
            assert!(ji.total <= ji.bound && ji.total > 0.0);
        }
        let adv = advantageous();
        for x in [-1.5, 0.3, 2.0] {
            let gl = adv.fixation_integral(&[x]);
            let mid = midpoint_fixation_integral(&adv, x);
            assert!(((gl - mid) / mid).abs() < 1e-6, "x = {x}: {gl} vs {mid}");
        }
    }

    #[test]
    fn jump_intensity_grows_with_size() {
        let p = ModelParams::default_d1();
        let mut last = 0.0;
        for i in 1..100 {
            let t = p.jump_intensity(&[0.5], i as f64 * 0.1).unwrap().total;
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn rescaled_model_keeps_the_jump_law() {
        let p = advantageous();
        let q = rescale_fixation(&p).unwrap();
        for x in [-2.0, -0.3, 0.8, 1.5] {
            let a = p.jump_intensity(&[x], 2.0).unwrap().total;
            let b = q.jump_intensity(&[x], 2.0).unwrap().total;
            assert!(((a - b) / a).abs() < 1e-10);
            for k in 1..50 {
                let w = [-3.0 + 6.0 * k as f64 / 50.0];
                if w[0].abs() < 1e-9 {
                    continue;
                }
                let prod_p = p.g(&[x], &w) * p.mutation.density(&w);
                let prod_q = q.g(&[x], &w) * q.mutation.density(&w);
                assert!((prod_p - prod_q).abs() <= 1e-12 * prod_p.abs().max(1e-300));
                let gp = p.g(&[x], &w);
                if gp > 0.0 {
                    let ratio = q.g(&[x], &w) / gp;
                    assert!((ratio - 1.0 / w[0].abs().min(1.0)).abs() < 1e-14);
                }
            }
        }
        assert!(matches!(
            rescale_fixation(&ModelParams::default_d1()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn rescaled_bound_dominates() {
        let q = rescale_fixation(&advantageous()).unwrap();
        for i in 0..200 {
            let x = -4.0 + 8.0 * i as f64 / 199.0;
            let b = q.g_bound(f64::abs(x));
            for k in 0..400 {
                let w = [-4.0 + 8.0 * (k as f64 + 0.5) / 400.0];
                assert!(q.g(&[x], &w) <= b * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn clipped_abs_expectation_matches_quadrature() {
        let tau = 0.5;
        let n = 200_000;
        let half = 12.0 * tau;
        let h = 2.0 * half / n as f64;
        let mid: f64 = (0..n)
            .map(|i| {
                let w: f64 = -half + (i as f64 + 0.5) * h;
                w.abs().min(1.0) * (-0.5 * w * w / (tau * tau)).exp() / (2.0 * std::f64::consts::PI * tau * tau).sqrt()
                    * h
            })
            .sum();
        assert!((expected_clipped_abs(tau) - mid).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gamma_is_recomputed(gn in 1e-3f64..10.0, sigma in 1e-2f64..5.0) {
            let mut p = ModelParams::default_d1();
            p.gamma_n = gn;
            p.sigma = sigma;
            prop_assert_eq!(p.gamma(), gn * sigma * sigma / 8.0);
        }

        #[test]
        fn advantageous_sign_structure(x in -5.0f64..5.0, w in -5.0f64..5.0) {
            let p = advantageous();
            let g = p.g(&[x], &[w]);
            prop_assert!(g >= 0.0 && g <= p.fixation.g_max);
            if (x + w).abs() >= x.abs() {
                prop_assert_eq!(g, 0.0);
            } else {
                prop_assert!(g > 0.0);
            }
        }

        #[test]
        fn deleterious_is_positive_and_bounded(x in -6.0f64..6.0, w in -6.0f64..6.0) {
            let p = ModelParams::default_d1();
            let g = p.g(&[x], &[w]);
            prop_assert!(g > 0.0 && g <= p.fixation.g_max);
        }
    }
}
