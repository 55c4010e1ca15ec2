use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, MarketError, Result};
use crate::params::{IntRange, MarketParams, Range, ScenarioConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobileUser {
    pub id: usize,
    /// Local CPU cycles per second.
    pub f_u: f64,
    /// Transmission power (W).
    pub e_t: f64,
    /// Local compute power (W).
    pub e_u: f64,
    /// Task size in bits.
    pub d_u: f64,
    /// Required CPU cycles.
    pub r_u: f64,
    /// Reachable ES ids, ascending. Empty means local-only.
    pub candidates: Vec<usize>,
    /// Participation probability a_i.
    pub a: f64,
    pub gamma_low: f64,
    pub gamma_high: f64,
}

impl MobileUser {
    pub fn local_only(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn mean_gamma(&self) -> f64 {
        0.5 * (self.gamma_low + self.gamma_high)
    }

    /// Position of `es` in the candidate list.
    pub fn candidate_slot(&self, es: usize) -> Option<usize> {
        self.candidates.binary_search(&es).ok()
    }

    /// Time to run the task on the device itself.
    pub fn local_time(&self) -> f64 {
        self.r_u / self.f_u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeServer {
    pub id: usize,
    pub f_e: f64,
    pub e_e: f64,
    /// Local VMs G_j.
    pub g_e: usize,
    /// Subcarriers K_j: concurrent MUs the ES can talk to.
    pub k_e: usize,
    pub c_hw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudServer {
    pub id: usize,
    pub f_c: f64,
    pub e_c: f64,
    pub g_c: usize,
    /// Poisson mean of inherent demand.
    pub sigma: f64,
    pub p_inherent: f64,
    pub q_inherent: f64,
    pub c_hw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mus: Vec<MobileUser>,
    pub ess: Vec<EdgeServer>,
    pub css: Vec<CloudServer>,
    pub params: MarketParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for (idx, m) in self.mus.iter().enumerate() {
            if m.id != idx {
                return Err(config_err(format!("MU ids must be dense, found {} at {idx}", m.id)));
            }
            if !(m.a > 0.0 && m.a <= 1.0) {
                return Err(config_err(format!("MU {idx}: participation must lie in (0,1]")));
            }
            // Point ranges are allowed so degenerate configs stay expressible.
            if m.gamma_low > m.gamma_high {
                return Err(config_err(format!("MU {idx}: gamma bounds out of order")));
            }
            if !(m.f_u > 0.0 && m.e_t > 0.0 && m.e_u > 0.0 && m.gamma_low > 0.0) {
                return Err(config_err(format!("MU {idx}: powers and capabilities must be positive")));
            }
            if m.candidates.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err(format!("MU {idx}: candidates must be strictly ascending")));
            }
            if m.candidates.iter().any(|&j| j >= self.ess.len()) {
                return Err(config_err(format!("MU {idx}: candidate outside the ES set")));
            }
        }
        for (idx, e) in self.ess.iter().enumerate() {
            if e.id != idx {
                return Err(config_err(format!("ES ids must be dense, found {} at {idx}", e.id)));
            }
            if e.g_e > e.k_e {
                return Err(config_err(format!("ES {idx}: more VMs than subcarriers")));
            }
            if !(e.f_e > 0.0 && e.e_e > 0.0) {
                return Err(config_err(format!("ES {idx}: capability and power must be positive")));
            }
        }
        for (idx, c) in self.css.iter().enumerate() {
            if c.id != idx {
                return Err(config_err(format!("CS ids must be dense, found {} at {idx}", c.id)));
            }
            if c.g_c == 0 || c.sigma < 0.0 || !(c.f_c > 0.0) {
                return Err(config_err(format!("CS {idx}: needs g_c >= 1, sigma >= 0, f_c > 0")));
            }
        }
        Ok(())
    }

    /// MUs whose candidate set contains `es`, ascending.
    pub fn mus_in_range(&self, es: usize) -> Vec<usize> {
        self.mus
            .iter()
            .filter(|m| m.candidate_slot(es).is_some())
            .map(|m| m.id)
            .collect()
    }
}

/// The candidate set C_i exactly as stored.
pub fn candidate_servers(mu: usize, scenario: &Scenario) -> Result<&[usize]> {
    scenario
        .mus
        .get(mu)
        .map(|m| m.candidates.as_slice())
        .ok_or(MarketError::Lookup { kind: "MU", id: mu })
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.lo == r.hi {
        r.lo
    } else {
        // Clamp guards the half-open float draw against rounding past hi.
        rng.random_range(r.lo..=r.hi).clamp(r.lo, r.hi)
    }
}

fn draw_int(rng: &mut ChaCha8Rng, r: IntRange) -> usize {
    rng.random_range(r.lo..=r.hi)
}

pub(crate) fn sample_es(rng: &mut ChaCha8Rng, id: usize, cfg: &ScenarioConfig) -> EdgeServer {
    let f_e = draw(rng, cfg.f_e);
    let e_e = draw(rng, cfg.e_e);
    let k_e = draw_int(rng, cfg.k_e);
    let g_e = draw_int(rng, cfg.g_e).min(k_e);
    EdgeServer { id, f_e, e_e, g_e, k_e, c_hw: cfg.c_hw_e }
}

pub(crate) fn sample_cs(rng: &mut ChaCha8Rng, id: usize, cfg: &ScenarioConfig) -> CloudServer {
    CloudServer {
        id,
        f_c: draw(rng, cfg.f_c),
        e_c: draw(rng, cfg.e_c),
        g_c: draw_int(rng, cfg.g_c),
        sigma: draw(rng, cfg.sigma),
        p_inherent: cfg.p_inherent,
        q_inherent: cfg.q_inherent,
        c_hw: cfg.c_hw_c,
    }
}

pub(crate) fn sample_mu(rng: &mut ChaCha8Rng, id: usize, candidates: Vec<usize>, cfg: &ScenarioConfig) -> MobileUser {
    let f_u = draw(rng, cfg.f_u);
    let e_t = draw(rng, cfg.e_t);
    let e_u = draw(rng, cfg.e_u);
    let d_u = draw(rng, cfg.d_u);
    let a = draw(rng, cfg.a);
    MobileUser {
        id,
        f_u,
        e_t,
        e_u,
        d_u,
        r_u: cfg.cycles_per_bit * d_u,
        candidates,
        a,
        gamma_low: cfg.gamma.lo,
        gamma_high: cfg.gamma.hi,
    }
}

fn draw_candidates(rng: &mut ChaCha8Rng, n_es: usize, mean: f64) -> Vec<usize> {
    let extra = if n_es > 1 {
        let p = ((mean - 1.0) / (n_es - 1) as f64).clamp(0.0, 1.0);
        Binomial::new((n_es - 1) as u64, p).expect("p clamped to [0,1]").sample(rng) as usize
    } else {
        0
    };
    let mut picked = sample_indices(rng, n_es, 1 + extra).into_vec();
    picked.sort_unstable();
    picked
}

/// Random scenario; a pure function of `(cfg, params, seed)`.
pub fn generate_scenario(cfg: &ScenarioConfig, params: &MarketParams, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    params.validate()?;
    if cfg.mus == 0 {
        return Err(config_err("MU count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ess: Vec<_> = (0..cfg.ess).map(|j| sample_es(&mut rng, j, cfg)).collect();
    let css: Vec<_> = (0..cfg.css).map(|k| sample_cs(&mut rng, k, cfg)).collect();
    let mus: Vec<_> = (0..cfg.mus)
        .map(|i| {
            let cands = draw_candidates(&mut rng, cfg.ess, cfg.mean_candidates);
            sample_mu(&mut rng, i, cands, cfg)
        })
        .collect();
    let scenario = Scenario { mus, ess, css, params: params.clone() };
    scenario.validate()?;
    Ok(scenario)
}
