//! Brute-force oracles and hand-built fixtures shared by the integration tests.
//!
//! Every oracle here enumerates outcomes directly instead of reusing the
//! engine's dynamic programs, so agreement is a real cross-check.

#![allow(dead_code)]

use hybrid_market::expectation::{CsSlot, SlotKey, VolunteerEntry};
use hybrid_market::model::{CloudServer, EdgeServer, MobileUser, Scenario};
use hybrid_market::params::{IntRange, MarketParams, Range, ScenarioConfig};

/// Probability of one participation vector (bit i = MU i attends).
pub fn vector_prob(probs: &[f64], mask: u32) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, &a)| if mask >> i & 1 == 1 { a } else { 1.0 - a })
        .product()
}

pub fn brute_tail(probs: &[f64], x: usize) -> f64 {
    (0..1u32 << probs.len())
        .filter(|m| m.count_ones() as usize > x)
        .map(|m| vector_prob(probs, m))
        .sum()
}

/// Pr(attend and volunteer): the lowest-utility attendees (ties to lower id)
/// give way until attendance fits `capacity`.
pub fn brute_volunteer(entries: &[VolunteerEntry], capacity: usize) -> Vec<f64> {
    let probs: Vec<f64> = entries.iter().map(|e| e.a).collect();
    let mut out = vec![0.0; entries.len()];
    for mask in 0..1u32 << entries.len() {
        let mut present: Vec<usize> = (0..entries.len()).filter(|&i| mask >> i & 1 == 1).collect();
        if present.len() <= capacity {
            continue;
        }
        present.sort_by(|&x, &y| entries[x].utility.total_cmp(&entries[y].utility).then(entries[x].mu.cmp(&entries[y].mu)));
        let pr = vector_prob(&probs, mask);
        for &i in &present[..present.len() - capacity] {
            out[i] += pr;
        }
    }
    out
}

/// E[β] by enumeration: slots ranked by (price, cs, index); rank r is used
/// iff attendance > g_e + r; then averaged over each CS's slots.
pub fn brute_fulfillment(attendance: &[f64], g_e: usize, slots: &[SlotKey]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&x, &y| {
        slots[x].price.total_cmp(&slots[y].price).then(slots[x].cs.cmp(&slots[y].cs)).then(slots[x].index.cmp(&slots[y].index))
    });
    let mut raw = vec![0.0; slots.len()];
    for mask in 0..1u32 << attendance.len() {
        let excess = (mask.count_ones() as usize).saturating_sub(g_e);
        let pr = vector_prob(attendance, mask);
        for (rank, &s) in order.iter().enumerate() {
            if rank < excess {
                raw[s] += pr;
            }
        }
    }
    slots
        .iter()
        .map(|s| {
            let same: Vec<usize> = (0..slots.len()).filter(|&t| slots[t].cs == s.cs).collect();
            same.iter().map(|&t| raw[t]).sum::<f64>() / same.len() as f64
        })
        .collect()
}

/// min(Poisson(σ), cap) from the closed-form pmf, overflow mass on `cap`.
pub fn brute_capped_poisson(sigma: f64, cap: usize) -> Vec<f64> {
    let mut pmf: Vec<f64> = (0..cap)
        .map(|h| {
            let fact: f64 = (1..=h).map(|x| x as f64).product();
            (-sigma).exp() * sigma.powi(h as i32) / fact
        })
        .collect();
    let below: f64 = pmf.iter().sum();
    pmf.push(1.0 - below);
    pmf
}

/// (R^C, E[max(0, load - G_c)]) by enumerating every ES's participation
/// vector jointly with the capped inherent demand. `groups[d]` is
/// (attendance probabilities, g_e) for demand index d.
pub fn brute_cs_risk(cs: &CloudServer, groups: &[(Vec<f64>, usize)], slots: &[CsSlot]) -> (f64, f64) {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
    let eps = brute_capped_poisson(cs.sigma, cs.g_c);
    let (mut r_c, mut overflow) = (0.0, 0.0);
    for mask in 0..1u32 << all.len() {
        let pr = vector_prob(&all, mask);
        let mut used = 0usize;
        let mut offset = 0;
        for (d, (probs, g_e)) in groups.iter().enumerate() {
            let att = (0..probs.len()).filter(|&i| mask >> (offset + i) & 1 == 1).count();
            offset += probs.len();
            let excess = att.saturating_sub(*g_e);
            used += slots.iter().filter(|s| s.demand == d && s.rank < excess).count();
        }
        for (h, &pe) in eps.iter().enumerate() {
            let load = used + h;
            if load > cs.g_c {
                r_c += pr * pe;
                overflow += pr * pe * (load - cs.g_c) as f64;
            }
        }
    }
    (r_c, overflow)
}

pub fn mu(id: usize, a: f64, candidates: Vec<usize>) -> MobileUser {
    MobileUser {
        id,
        f_u: 1.0e9,
        e_t: 0.5,
        e_u: 0.5,
        d_u: 1.5e6,
        r_u: 9.0e8,
        candidates,
        a,
        gamma_low: 250.0,
        gamma_high: 250.0,
    }
}

pub fn es(id: usize, g_e: usize, k_e: usize) -> EdgeServer {
    EdgeServer { id, f_e: 1.0e12, e_e: 0.5, g_e, k_e, c_hw: 0.05 }
}

pub fn cs(id: usize, g_c: usize, sigma: f64) -> CloudServer {
    CloudServer { id, f_c: 2.0e12, e_c: 0.5, g_c, sigma, p_inherent: 2.0, q_inherent: 1.5, c_hw: 0.05 }
}

/// Desk weights (v1 = v2 = 5): E[v] ≈ 6.48 for [`mu`] at [`es`].
pub fn params() -> MarketParams {
    hybrid_market::desk_params()
}

pub fn scenario(mus: Vec<MobileUser>, ess: Vec<EdgeServer>, css: Vec<CloudServer>) -> Scenario {
    Scenario { mus, ess, css, params: params() }
}

/// Random instance with scaled-down capacities so that MUs compete.
pub fn scaled_scenario(seed: u64) -> Scenario {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let cfg = ScenarioConfig {
        mus: r.random_range(6..=20),
        ess: r.random_range(2..=5),
        css: r.random_range(1..=3),
        g_e: IntRange::new(1, 2),
        k_e: IntRange::new(3, 4),
        g_c: IntRange::new(1, 3),
        sigma: Range::new(0.5, 1.0),
        ..Default::default()
    };
    hybrid_market::generate_scenario(&cfg, &params(), seed).expect("valid config")
}
