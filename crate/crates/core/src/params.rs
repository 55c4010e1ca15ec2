//! Market parameters, sampling ranges and the on-disk scenario schema.
//!
//! A scenario file is TOML:
//!
//! ```toml
//! seed = 7                 # scenario generation seed
//!
//! [params]                 # MarketParams, every key optional
//! tau = 0.1
//! rho = [0.3, 0.3, 0.3, 0.3, 0.3]
//!
//! [generate]               # ScenarioConfig, every key optional
//! mus = 40
//! ess = 8
//! css = 3
//! f_u = [1.0e9, 1.5e9]
//!
//! [eua]                    # alternative to counts: EUA tables
//! stations = "sites.csv"
//! users = "users.csv"
//! radius_m = 150.0
//! ```
//!
//! With an `[eua]` table the MU/ES attributes are still drawn from the
//! `[generate]` ranges; only locations and candidate sets come from the files.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketParams {
    /// Channel bandwidth W in Hz.
    pub bandwidth_w: f64,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub q_ue: f64,
    pub q_eu: f64,
    pub q_ec: f64,
    pub tau: f64,
    /// Risk thresholds rho1..rho5.
    pub rho: [f64; 5],
    pub p_min_ue: f64,
    pub p_min_ec: f64,
    pub dp_mu: f64,
    pub dp_es: f64,
    pub u_min: f64,
    /// Largest set the verification module enumerates exhaustively.
    pub exact_enum_limit: usize,
    /// Draws used by sampling diagnostics (true E[v] versus plug-in E[v]).
    pub mc_expectation_samples: usize,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            bandwidth_w: 6e6,
            v1: 1.0,
            v2: 1.0,
            v3: 1.0,
            q_ue: 3.0,
            q_eu: 3.0,
            q_ec: 2.0,
            tau: 0.1,
            rho: [0.3; 5],
            p_min_ue: 1.5,
            p_min_ec: 1.5,
            dp_mu: 0.1,
            dp_es: 0.1,
            u_min: 0.01,
            exact_enum_limit: 16,
            mc_expectation_samples: 100_000,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_w > 0.0) {
            return Err(config_err("bandwidth_w must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(config_err("tau must be non-negative"));
        }
        if self.rho.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(config_err("every rho must lie in (0, 1]"));
        }
        if !(self.u_min > 0.0) {
            return Err(config_err("u_min must be positive"));
        }
        if !(self.dp_mu > 0.0 && self.dp_es > 0.0) {
            return Err(config_err("price steps must be positive"));
        }
        if self.q_ue < 0.0 || self.q_eu < 0.0 || self.q_ec < 0.0 {
            return Err(config_err("penalties must be non-negative"));
        }
        if self.p_min_ue < 0.0 || self.p_min_ec < 0.0 {
            return Err(config_err("initial prices must be non-negative"));
        }
        Ok(())
    }

    /// Contract-count ceiling ⌊(1+τ)·supply⌋, robust to float noise at integer products.
    pub fn overbooked(&self, supply: usize) -> usize {
        ((1.0 + self.tau) * supply as f64 + 1e-9).floor() as usize
    }
}

/// Closed interval sampled uniformly; serialized as `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }
    pub const fn point(x: f64) -> Self {
        Range { lo: x, hi: x }
    }
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Inclusive integer interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        IntRange { lo, hi }
    }
}

impl From<[usize; 2]> for IntRange {
    fn from(v: [usize; 2]) -> Self {
        IntRange { lo: v[0], hi: v[1] }
    }
}

impl From<IntRange> for [usize; 2] {
    fn from(r: IntRange) -> Self {
        [r.lo, r.hi]
    }
}

/// Counts and per-field sampling ranges for random scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mus: usize,
    pub ess: usize,
    pub css: usize,
    /// Mean candidate-set size; each MU draws 1 + Binomial(|ES|-1, ·) candidates.
    pub mean_candidates: f64,
    pub f_u: Range,
    pub f_e: Range,
    pub f_c: Range,
    /// Task data size in bits.
    pub d_u: Range,
    pub cycles_per_bit: f64,
    pub e_t: Range,
    pub e_u: Range,
    pub e_e: Range,
    pub e_c: Range,
    pub gamma: Range,
    pub a: Range,
    pub g_e: IntRange,
    pub k_e: IntRange,
    pub g_c: IntRange,
    pub sigma: Range,
    pub c_hw_e: f64,
    pub c_hw_c: f64,
    pub p_inherent: f64,
    pub q_inherent: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mus: 40,
            ess: 8,
            css: 3,
            mean_candidates: 3.0,
            f_u: Range::new(1.0e9, 1.5e9),
            f_e: Range::new(1.0e12, 3.0e12),
            f_c: Range::new(1.0e12, 3.0e12),
            d_u: Range::new(1.0e6, 1.5e6),
            cycles_per_bit: 600.0,
            e_t: Range::new(0.5, 0.55),
            e_u: Range::new(0.45, 0.5),
            e_e: Range::new(0.45, 0.5),
            e_c: Range::new(0.45, 0.5),
            gamma: Range::new(100.0, 400.0),
            a: Range::new(0.64, 0.96),
            g_e: IntRange::new(4, 5),
            k_e: IntRange::new(6, 8),
            g_c: IntRange::new(8, 12),
            sigma: Range::new(2.0, 4.0),
            c_hw_e: 0.05,
            c_hw_c: 0.05,
            p_inherent: 2.0,
            q_inherent: 1.5,
        }
    }
}

impl ScenarioConfig {
    pub fn with_counts(mus: usize, ess: usize, css: usize) -> Self {
        ScenarioConfig { mus, ess, css, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ess == 0 || self.css == 0 {
            return Err(config_err("ES and CS counts must be at least 1"));
        }
        let ranges = [
            ("f_u", self.f_u),
            ("f_e", self.f_e),
            ("f_c", self.f_c),
            ("d_u", self.d_u),
            ("e_t", self.e_t),
            ("e_u", self.e_u),
            ("e_e", self.e_e),
            ("e_c", self.e_c),
            ("gamma", self.gamma),
            ("a", self.a),
            ("sigma", self.sigma),
        ];
        for (name, r) in ranges {
            if !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(config_err(format!("range `{name}` is empty or not finite")));
            }
        }
        for (name, r) in [("f_u", self.f_u), ("f_e", self.f_e), ("f_c", self.f_c), ("e_t", self.e_t)] {
            if r.lo <= 0.0 {
                return Err(config_err(format!("range `{name}` must be positive")));
            }
        }
        if self.gamma.lo <= 0.0 {
            return Err(config_err("gamma range must be positive"));
        }
        if !(self.a.lo > 0.0 && self.a.hi <= 1.0) {
            return Err(config_err("participation range must lie in (0, 1]"));
        }
        if self.sigma.lo < 0.0 {
            return Err(config_err("sigma must be non-negative"));
        }
        for (name, r) in [("g_e", self.g_e), ("k_e", self.k_e), ("g_c", self.g_c)] {
            if r.lo > r.hi {
                return Err(config_err(format!("range `{name}` is empty")));
            }
        }
        if self.g_c.lo == 0 {
            return Err(config_err("every CS needs at least one VM"));
        }
        if !(self.cycles_per_bit > 0.0) {
            return Err(config_err("cycles_per_bit must be positive"));
        }
        if !(self.mean_candidates >= 1.0) {
            return Err(config_err("mean_candidates must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EuaSource {
    pub stations: String,
    pub users: String,
    pub radius_m: f64,
}

/// Parsed scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: MarketParams,
    #[serde(default)]
    pub generate: ScenarioConfig,
    #[serde(default)]
    pub eua: Option<EuaSource>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }
}

/// Settings used for the desk-scale reproductions. Unit weights put every
/// valuation (about 0.8 to 1.3) below the 1.5 opening price, and the futures
/// price cap sits up to (1-a)q_ue/a ≈ 1.7 below E[v]; weight 5 clears both.
pub fn desk_params() -> MarketParams {
    MarketParams { v1: 5.0, v2: 5.0, ..MarketParams::default() }
}
