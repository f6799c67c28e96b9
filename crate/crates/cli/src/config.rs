//! Flat run configuration. Keys follow the model's symbols.

use std::path::Path;

use adaptqsd_core::qsd::BurnIn;
use adaptqsd_core::{
    rescale_fixation, ArrivalSpec, Binning, FixationFamily, FixationSpec, GrowthSpec, ModelParams, MutationSpec,
    SimConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BurnInKey {
    Fixed(f64),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub dim: usize,
    pub v: f64,
    pub sigma: f64,
    pub gamma_n: f64,
    pub r0: f64,
    pub a: f64,
    pub mu: f64,
    pub fixation: String,
    pub g_max: f64,
    pub s: f64,
    pub rescaled: bool,
    pub m_nu: f64,
    pub tau: f64,
    pub quad_order: usize,
    // simulation
    pub dt_max: f64,
    pub y_ext: f64,
    pub x_max: f64,
    pub horizon: f64,
    #[serde(rename = "L")]
    pub l: Option<f64>,
    pub substep_alpha: f64,
    pub record_every: Option<f64>,
    pub x0: Vec<f64>,
    /// `null` starts at the carrying capacity of `x0`, clamped into the truncation box.
    pub y0: Option<f64>,
    // histograms; the box is the truncation domain, or the `box_*` keys without truncation
    pub bins_x: usize,
    pub bins_y: usize,
    pub box_x: f64,
    pub box_y_lo: f64,
    pub box_y_hi: f64,
    // Fleming-Viot
    pub particles: usize,
    pub burn_in: BurnInKey,
    pub window: f64,
    pub batches: usize,
    // survival regression
    pub replicates: usize,
    pub surv_horizon: f64,
    pub surv_fit_from: f64,
    pub surv_grid: usize,
    // eta
    pub eta_t: f64,
    pub eta_nodes_x: usize,
    pub eta_nodes_y: usize,
    pub eta_replicates: usize,
    // Q-process
    pub q_delta: f64,
    pub q_starts: usize,
    pub q_horizon: f64,
    pub q_paths_written: usize,
    // oracle
    pub oracle_nx: usize,
    pub oracle_ny: usize,
    // diagnostics
    pub curve_dt: f64,
    pub curve_t_max: f64,
    pub curve_replicates: usize,
    pub curve_fit_from: f64,
    pub l_list: Vec<f64>,
    pub acf_replicates: usize,
    // run
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("shipped default config parses")
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (or the shipped default) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => {
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?
            }
            None => DEFAULT_CONFIG.to_string(),
        };
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        // a partial file is completed from the default
        let mut merged = serde_json::from_str::<Value>(DEFAULT_CONFIG).expect("default parses");
        let (Some(base), Some(user)) = (merged.as_object_mut(), value.as_object_mut()) else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        for (k, v) in std::mem::take(user) {
            if !base.contains_key(&k) {
                return Err(CliError::Config(format!("unknown config key `{k}`")));
            }
            base.insert(k, v);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            if !base.contains_key(k) {
                return Err(CliError::Config(format!("unknown config key `{k}`")));
            }
            base.insert(k.to_string(), parse_value(v));
        }
        let cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        if let BurnInKey::Named(s) = &self.burn_in {
            if s != "auto" {
                return Err(CliError::Config(format!(
                    "burn_in must be a number or \"auto\", got {s:?}"
                )));
            }
        }
        if self.x0.len() != self.dim {
            return Err(CliError::Config(format!(
                "x0 has {} coordinates, dim is {}",
                self.x0.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// SHA-256 of every field that can change a result (all but `threads`).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("threads");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        let family = match self.fixation.as_str() {
            "deleterious_ok" => FixationFamily::DeleteriousOk,
            "advantageous_only" => FixationFamily::AdvantageousOnly,
            other => {
                return Err(CliError::Config(format!(
                    "fixation must be deleterious_ok or advantageous_only, got {other:?}"
                )))
            }
        };
        let p = ModelParams::new(
            self.dim,
            self.v,
            self.sigma,
            self.gamma_n,
            GrowthSpec::Quadratic { r0: self.r0, a: self.a },
            ArrivalSpec::LinearInN { mu: self.mu },
            FixationSpec {
                family,
                g_max: self.g_max,
                s: self.s,
                rescaled: false,
            },
            MutationSpec::gaussian(self.m_nu, self.tau),
        )
        .and_then(|p| p.with_quad_order(self.quad_order))
        .map_err(CliError::from_setup)?;
        if self.rescaled {
            // g / min(|w|, 1) with min(|w|, 1) nu
            return rescale_fixation(&p).map_err(|e| CliError::Config(e.to_string()));
        }
        Ok(p)
    }

    pub fn sim(&self) -> Result<SimConfig, CliError> {
        let mut c = SimConfig {
            dt_max: self.dt_max,
            y_ext: self.y_ext,
            x_max: self.x_max,
            horizon: self.horizon,
            truncation: None,
            substep_alpha: self.substep_alpha,
            record_every: self.record_every,
        };
        if let Some(l) = self.l {
            c = c.with_truncation(l);
        }
        c.validate().map_err(CliError::from_setup)?;
        Ok(c)
    }

    pub fn binning(&self) -> Result<Binning, CliError> {
        match self.l {
            Some(l) => Binning::truncation_box(self.dim, l, self.bins_x, self.bins_y),
            None => Binning::with_y_range(
                self.dim,
                self.box_x,
                self.box_y_lo,
                self.box_y_hi,
                self.bins_x,
                self.bins_y,
            ),
        }
        .map_err(CliError::from_setup)
    }

    pub fn eta_nodes(&self) -> Result<Binning, CliError> {
        match self.l {
            Some(l) => Binning::truncation_box(self.dim, l, self.eta_nodes_x, self.eta_nodes_y),
            None => Binning::with_y_range(
                self.dim,
                self.box_x,
                self.box_y_lo,
                self.box_y_hi,
                self.eta_nodes_x,
                self.eta_nodes_y,
            ),
        }
        .map_err(CliError::from_setup)
    }

    pub fn burn_in(&self) -> BurnIn {
        match self.burn_in {
            BurnInKey::Fixed(b) => BurnIn::Fixed(b),
            BurnInKey::Named(_) => BurnIn::Auto,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_matches_library_default() {
        let c = RunConfig::default();
        let p = c.params().unwrap();
        let d = ModelParams::default_d1();
        assert_eq!(p.v, d.v);
        assert_eq!(p.growth, d.growth);
        assert_eq!(p.fixation, d.fixation);
        assert_eq!(p.mutation, d.mutation);
        assert_eq!(p.gamma_n, d.gamma_n);
    }

    #[test]
    fn overrides_and_hash() {
        let base = RunConfig::load(None, &[]).unwrap();
        let same = RunConfig::load(None, &["threads=3".into()]).unwrap();
        assert_eq!(base.hash(), same.hash());
        let changed = RunConfig::load(None, &["v=0.25".into()]).unwrap();
        assert_ne!(base.hash(), changed.hash());
        assert_eq!(changed.v, 0.25);
        let auto = RunConfig::load(None, &["burn_in=5".into()]).unwrap();
        assert_eq!(auto.burn_in(), BurnIn::Fixed(5.0));
        assert!(matches!(
            RunConfig::load(None, &["nope=1".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["burn_in=soon".into()]),
            Err(CliError::Config(_))
        ));
        let untrunc = RunConfig::load(None, &["L=null".into()]).unwrap();
        assert_eq!(untrunc.sim().unwrap().truncation, None);
    }
}
