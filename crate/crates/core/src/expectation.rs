//! Valuations, expectations over attendance / channel / inherent demand, and
//! the five risk quantities.
//!
//! Every attendance-dependent quantity reduces to a Poisson-binomial
//! distribution, which is computed exactly by an O(n²) count DP. No sampling
//! is needed for any contract-set size, so `exact_enum_limit` only bounds the
//! auditors' brute-force searches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, MarketError, Result};
use crate::model::{CloudServer, EdgeServer, MobileUser};
use crate::params::MarketParams;

/// Slack on probability-vs-threshold comparisons so that a risk computed two
/// ways (DP and enumeration) never lands on opposite sides of ρ.
pub const RISK_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationBreakdown {
    pub t_save: f64,
    pub c_save: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractTermsUE {
    pub mu: usize,
    pub es: usize,
    pub price: f64,
    pub q_ue: f64,
    pub q_eu: f64,
}

/// One booked cloud slot. `task` is the slot's request index within its ES:
/// slots are not bound to a particular MU until settlement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractTermsEC {
    pub task: usize,
    pub es: usize,
    pub cs: usize,
    pub price: f64,
    pub q_ec: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub r1_u: Option<f64>,
    pub r2_u: Option<f64>,
    pub r1_e: Option<f64>,
    pub r2_e: Option<f64>,
    pub r_c: Option<f64>,
}

/// Shannon uplink rate W·log2(1 + e_t·γ) in bits per second.
pub fn uplink_rate(mu: &MobileUser, gamma: f64, params: &MarketParams) -> f64 {
    params.bandwidth_w * (1.0 + mu.e_t * gamma).log2()
}

pub fn valuation(mu: &MobileUser, es: &EdgeServer, gamma: f64, params: &MarketParams) -> Result<ValuationBreakdown> {
    if !(gamma > 0.0) || !(mu.e_t * gamma > 0.0) {
        return Err(MarketError::Domain(format!("channel gain must be positive, got {gamma}")));
    }
    let rate = uplink_rate(mu, gamma, params);
    let t_save = mu.r_u / mu.f_u - (mu.r_u / es.f_e + mu.d_u / rate);
    let c_save = mu.r_u * mu.e_u / mu.f_u - mu.d_u * mu.e_t / rate;
    Ok(ValuationBreakdown { t_save, c_save, v: params.v1 * t_save + params.v2 * c_save })
}

/// Plug-in expectation: the valuation at the mean channel gain.
pub fn expected_valuation(mu: &MobileUser, es: &EdgeServer, params: &MarketParams) -> f64 {
    valuation(mu, es, mu.mean_gamma(), params).map(|b| b.v).unwrap_or(f64::NEG_INFINITY)
}

/// Sample mean of v over γ ~ U(low, high). The rate term is concave in γ, so
/// this differs from [`expected_valuation`]; it exists as a diagnostic only.
pub fn sampled_valuation_mean(mu: &MobileUser, es: &EdgeServer, params: &MarketParams, seed: u64) -> f64 {
    let n = params.mc_expectation_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let g = if mu.gamma_low < mu.gamma_high {
            rng.random_range(mu.gamma_low..mu.gamma_high)
        } else {
            mu.gamma_low
        };
        acc += valuation(mu, es, g, params).map(|b| b.v).unwrap_or(0.0);
    }
    acc / n as f64
}

/// c^E: energy cost of running the task at the ES plus per-VM hardware cost.
pub fn es_cost(mu: &MobileUser, es: &EdgeServer, params: &MarketParams) -> f64 {
    params.v3 * mu.r_u * es.e_e / es.f_e + es.c_hw
}

/// c^C for a task of `r_u` cycles, priced with the CS's own power draw.
pub fn cs_cost(r_u: f64, cs: &CloudServer, params: &MarketParams) -> f64 {
    params.v3 * r_u * cs.e_c / cs.f_c + cs.c_hw
}

/// Adds one Bernoulli(a) to a count pmf.
pub fn pmf_push(pmf: &[f64], a: f64) -> Vec<f64> {
    let mut out = vec![0.0; pmf.len() + 1];
    for (k, &p) in pmf.iter().enumerate() {
        out[k] += p * (1.0 - a);
        out[k + 1] += p * a;
    }
    out
}

/// Pmf of Σα_i for independent α_i ~ Bernoulli(probs[i]).
pub fn attendance_pmf(probs: &[f64]) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(probs.len() + 1);
    pmf.push(1.0);
    for &a in probs {
        pmf.push(0.0);
        for k in (0..pmf.len()).rev() {
            let stay = pmf[k] * (1.0 - a);
            let moved = if k > 0 { pmf[k - 1] * a } else { 0.0 };
            pmf[k] = stay + moved;
        }
    }
    pmf
}

/// Pr(count > x) under `pmf`.
pub fn pmf_tail(pmf: &[f64], x: usize) -> f64 {
    pmf.iter().skip(x + 1).sum()
}

/// Pr(Σα_i > x).
pub fn participation_tail_prob(probs: &[f64], x: usize) -> f64 {
    if probs.len() <= x {
        return 0.0;
    }
    pmf_tail(&attendance_pmf(probs), x)
}

/// A contractual MU as seen by its ES when picking volunteers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolunteerEntry {
    pub mu: usize,
    pub a: f64,
    /// Expected per-MU utility to the ES; the lowest volunteer first.
    pub utility: f64,
}

/// Order in which attendees are asked to volunteer: utility ascending, ties to the lower id.
pub fn volunteer_order(entries: &[VolunteerEntry]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.sort_by(|&x, &y| {
        entries[x]
            .utility
            .total_cmp(&entries[y].utility)
            .then(entries[x].mu.cmp(&entries[y].mu))
    });
    idx
}

/// Pr(λ_i = 1) per entry, in input order.
///
/// MU i volunteers iff it attends and at least `capacity` attendees rank
/// after it in [`volunteer_order`]: the excess `attendance - capacity` is
/// taken from the front of the order.
pub fn volunteer_probability(entries: &[VolunteerEntry], capacity: i64) -> Result<Vec<f64>> {
    if capacity < 0 {
        return Err(MarketError::Domain(format!("negative capacity {capacity}")));
    }
    let cap = capacity as usize;
    let mut out = vec![0.0; entries.len()];
    if entries.len() <= cap {
        return Ok(out);
    }
    let order = volunteer_order(entries);
    // Pmf of attendees strictly after the current position.
    let mut after = vec![1.0];
    for &e in order.iter().rev() {
        let at_least_cap: f64 = after.iter().skip(cap).sum();
        out[e] = entries[e].a * at_least_cap;
        after = pmf_push(&after, entries[e].a);
    }
    Ok(out)
}

/// ES-side per-MU expected margin at E[λ] = 0: a(p - c^E) + (1-a)q_ue.
/// Volunteer ranking, acceptance and trimming all use this key.
pub fn es_margin(a: f64, price: f64, cost: f64, params: &MarketParams) -> f64 {
    a * (price - cost) + (1.0 - a) * params.q_ue
}

/// Markov surrogate for R1: 1 - E[u]/u_min clipped to [0, 1]; below ρ1 iff E[u]/u_min > 1 - ρ1.
pub fn r1_surrogate(expected_utility: f64, u_min: f64) -> f64 {
    (1.0 - expected_utility / u_min).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MuAssessment {
    pub utility: f64,
    pub risk: RiskReport,
    pub r1_ok: bool,
    pub r2_ok: bool,
    pub feasible: bool,
}

/// ū = (1-E[λ])·a·(E[v]-p) - (1-a)·q_ue + a·E[λ]·q_eu.
pub fn mu_expected_utility(a: f64, price: f64, e_v: f64, e_lambda: f64, params: &MarketParams) -> f64 {
    (1.0 - e_lambda) * a * (e_v - price) - (1.0 - a) * params.q_ue + a * e_lambda * params.q_eu
}

pub fn mu_expected_utility_and_risks(
    a: f64,
    terms: &ContractTermsUE,
    e_v: f64,
    e_lambda: f64,
    params: &MarketParams,
) -> Result<MuAssessment> {
    if !(params.u_min > 0.0) {
        return Err(config_err("u_min must be positive"));
    }
    if !(0.0..=1.0).contains(&e_lambda) {
        return Err(MarketError::Domain(format!("E[lambda] = {e_lambda} outside [0,1]")));
    }
    let utility = (1.0 - e_lambda) * a * (e_v - terms.price) - (1.0 - a) * terms.q_ue + a * e_lambda * terms.q_eu;
    let r1_ok = utility / params.u_min > 1.0 - params.rho[0];
    let r2_ok = e_lambda <= params.rho[1] + RISK_TOL;
    Ok(MuAssessment {
        utility,
        risk: RiskReport {
            r1_u: Some(r1_surrogate(utility, params.u_min)),
            r2_u: Some(e_lambda),
            ..Default::default()
        },
        r1_ok,
        r2_ok,
        feasible: r1_ok && r2_ok,
    })
}

/// Largest price at which the R1 check still passes. ū is affine in p, so
/// the boundary is closed-form; a relative 1e-12 margin keeps it strict.
pub fn max_price_under_r1(a: f64, e_v: f64, e_lambda: f64, params: &MarketParams) -> f64 {
    let slope = (1.0 - e_lambda) * a;
    let floor = (1.0 - params.rho[0]) * params.u_min;
    let rest = -(1.0 - a) * params.q_ue + a * e_lambda * params.q_eu;
    if slope <= 0.0 {
        return if rest > floor { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    let bound = e_v - (floor - rest) / slope;
    bound - 1e-12 * bound.abs().max(1.0)
}

/// Price ceiling for MU `mu` at ES `es`: min(E[v], p_max under R1 at E[λ] = 0).
/// With `risk` false only the valuation ceiling applies.
pub fn pair_cap(mu: &MobileUser, es: &EdgeServer, params: &MarketParams, risk: bool) -> f64 {
    let ev = expected_valuation(mu, es, params);
    if risk {
        ev.min(max_price_under_r1(mu.a, ev, 0.0, params))
    } else {
        ev
    }
}

/// Ranking key of one booked slot within its ES.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotKey {
    pub cs: usize,
    pub index: usize,
    pub price: f64,
}

/// Settlement order of an ES's slots: cheapest first, i.e. highest per-use
/// ES utility, ties by (cs, index). Returns positions into `slots`.
pub fn slot_ranking(slots: &[SlotKey]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..slots.len()).collect();
    idx.sort_by(|&x, &y| {
        slots[x]
            .price
            .total_cmp(&slots[y].price)
            .then(slots[x].cs.cmp(&slots[y].cs))
            .then(slots[x].index.cmp(&slots[y].index))
    });
    idx
}

/// E[β] per slot (input order). The slot at rank r is used iff attendance
/// exceeds g_e + r; values are then averaged over each CS's slots.
pub fn fulfillment_probability(attendance: &[f64], g_e: usize, slots: &[SlotKey]) -> Vec<f64> {
    let pmf = attendance_pmf(attendance);
    fulfillment_from_pmf(&pmf, g_e, slots)
}

pub fn fulfillment_from_pmf(pmf: &[f64], g_e: usize, slots: &[SlotKey]) -> Vec<f64> {
    let order = slot_ranking(slots);
    let mut beta = vec![0.0; slots.len()];
    for (rank, &s) in order.iter().enumerate() {
        beta[s] = pmf_tail(pmf, g_e + rank);
    }
    let mut by_cs: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (s, b) in slots.iter().zip(&beta) {
        let e = by_cs.entry(s.cs).or_insert((0.0, 0));
        e.0 += b;
        e.1 += 1;
    }
    slots
        .iter()
        .map(|s| {
            let (sum, n) = by_cs[&s.cs];
            sum / n as f64
        })
        .collect()
}

/// One contractual MU in an ES assessment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsContractTerms {
    pub a: f64,
    pub price: f64,
    pub cost: f64,
    pub e_lambda: f64,
}

/// One booked slot in an ES assessment; `cost` is the ES's own cost for the task it would carry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsSlotTerms {
    pub price: f64,
    pub cost: f64,
    pub e_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsAssessment {
    pub utility: f64,
    pub risk: RiskReport,
    pub feasible: bool,
}

pub fn es_expected_utility_and_risks(
    g_e: usize,
    contracts: &[EsContractTerms],
    slots: &[EsSlotTerms],
    params: &MarketParams,
) -> EsAssessment {
    let mu_side: f64 = contracts
        .iter()
        .map(|c| {
            c.a * (1.0 - c.e_lambda) * (c.price - c.cost) + (1.0 - c.a) * params.q_ue - c.a * c.e_lambda * params.q_eu
        })
        .sum();
    let cs_side: f64 = slots
        .iter()
        .map(|s| -s.e_beta * (s.price - s.cost) - (1.0 - s.e_beta) * params.q_ec)
        .sum();
    let r1 = slots.iter().map(|s| 1.0 - s.e_beta).fold(0.0, f64::max);
    let probs: Vec<f64> = contracts.iter().map(|c| c.a).collect();
    let r2 = participation_tail_prob(&probs, g_e + slots.len());
    EsAssessment {
        utility: mu_side + cs_side,
        risk: RiskReport { r1_e: Some(r1), r2_e: Some(r2), ..Default::default() },
        feasible: r1 <= params.rho[2] + RISK_TOL && r2 <= params.rho[3] + RISK_TOL,
    }
}

/// Pmf of min(Poisson(σ), cap); the overflow mass sits on `cap`.
pub fn capped_poisson_pmf(sigma: f64, cap: usize) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(cap + 1);
    let mut term = (-sigma).exp();
    let mut below = 0.0;
    for h in 0..cap {
        pmf.push(term);
        below += term;
        term *= sigma / (h + 1) as f64;
    }
    pmf.push((1.0 - below).max(0.0));
    pmf
}

pub fn convolve(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() + y.len() - 1];
    for (i, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (j, &b) in y.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

/// Attendance law of one ES's contract set, as a CS sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct EsDemand {
    pub pmf: Vec<f64>,
    pub g_e: usize,
}

/// One slot booked at a CS. `rank` is the slot's settlement rank within its
/// ES, so slots of one ES are used together in rank order (dependent, not
/// independent, Bernoullis).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsSlot {
    pub demand: usize,
    pub rank: usize,
    pub price: f64,
    pub cost: f64,
    pub e_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsAssessment {
    pub utility: f64,
    /// R^C = Pr(ϑ = 1).
    pub r_c: f64,
    /// E[N | ϑ = 1]; E[ϑ]·E[N] = E[max(0, load - G_c)].
    pub e_n: f64,
    pub e_overflow: f64,
    pub e_eps: f64,
    pub feasible: bool,
}

/// Pmf of the number of this CS's slots the ESs actually use.
pub fn slot_usage_pmf(demands: &[EsDemand], slots: &[CsSlot]) -> Vec<f64> {
    let mut total = vec![1.0];
    for (d, demand) in demands.iter().enumerate() {
        let mut ranks: Vec<usize> = slots.iter().filter(|s| s.demand == d).map(|s| s.rank).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        let mut usage = vec![0.0; ranks.len() + 1];
        for (att, &p) in demand.pmf.iter().enumerate() {
            let excess = att.saturating_sub(demand.g_e);
            let used = ranks.iter().filter(|&&r| r < excess).count();
            usage[used] += p;
        }
        total = convolve(&total, &usage);
    }
    total
}

pub fn cs_expected_utility_and_risk(
    cs: &CloudServer,
    demands: &[EsDemand],
    slots: &[CsSlot],
    params: &MarketParams,
) -> CsAssessment {
    let eps = capped_poisson_pmf(cs.sigma, cs.g_c);
    let e_eps: f64 = eps.iter().enumerate().map(|(h, p)| h as f64 * p).sum();
    let load = convolve(&slot_usage_pmf(demands, slots), &eps);
    let mut r_c = 0.0;
    let mut e_overflow = 0.0;
    for (t, &p) in load.iter().enumerate().skip(cs.g_c + 1) {
        r_c += p;
        e_overflow += p * (t - cs.g_c) as f64;
    }
    let slot_part: f64 = slots
        .iter()
        .map(|s| s.e_beta * (s.price - s.cost) + (1.0 - s.e_beta) * params.q_ec)
        .sum();
    let utility = slot_part + e_eps * cs.p_inherent - e_overflow * (cs.p_inherent + cs.q_inherent);
    CsAssessment {
        utility,
        r_c,
        e_n: if r_c > 0.0 { e_overflow / r_c } else { 0.0 },
        e_overflow,
        e_eps,
        feasible: r_c <= params.rho[4] + RISK_TOL,
    }
}
