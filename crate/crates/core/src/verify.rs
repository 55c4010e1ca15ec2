//! Post-hoc auditors for stability, rationality, equilibrium prices and
//! Pareto efficiency. Everything is recomputed from the outcome by direct
//! enumeration; nothing here calls the matcher's own choice search.
//!
//! Conventions shared by the futures auditors:
//! - the final price of MU i at ES j is min(level_i, cap_ij);
//! - ES j may hold at most min(⌊(1+τ)(G+s)⌋, ⌊(1+τ)K⌋) contracts, s = booked slots;
//! - pairs closed by an R2 notice or a withdrawal are out of the market.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::expectation::{
    attendance_pmf, cs_cost, cs_expected_utility_and_risk, es_margin, fulfillment_probability,
    mu_expected_utility_and_risks, participation_tail_prob, volunteer_probability, ContractTermsUE, CsSlot,
    EsDemand, SlotKey, VolunteerEntry, RISK_TOL,
};
use crate::futures::{futures_pairs, FuturesOutcome, PairTerms, SlotStatus};
use crate::model::Scenario;
use crate::spot::{SpotMarket, SpotOutcome, SpotSlotStatus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Exhaustive removal search up to this contract-set size, single removals beyond.
    pub subset_cap: usize,
    pub coalition_size: usize,
    pub pareto_max_mus: usize,
    pub pareto_max_ess: usize,
    pub pareto_max_css: usize,
    /// Slack on utility comparisons.
    pub tol: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { subset_cap: 12, coalition_size: 3, pareto_max_mus: 8, pareto_max_ess: 3, pareto_max_css: 2, tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingPair {
    pub mu: usize,
    pub es: usize,
    /// 1: the ES would drop some of its MUs; 2: it would simply add this one.
    pub kind: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingCoalition {
    pub cs: usize,
    pub ess: Vec<usize>,
    /// 1: the CS would drop some held slots; 2: pure addition.
    pub kind: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoWitness {
    /// Alternative ES per MU.
    pub assignment: Vec<Option<usize>>,
    pub sw_gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub blocking_pairs: Vec<BlockingPair>,
    pub blocking_coalitions: Vec<BlockingCoalition>,
    pub ir_violations: Vec<String>,
    pub ce_violations: Vec<String>,
    pub pareto_improvement_found: bool,
    pub pareto_witness: Option<ParetoWitness>,
    /// False when the instance was too large for the Pareto search.
    pub pareto_checked: bool,
    pub subset_cap: usize,
    pub coalition_size: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.blocking_pairs.is_empty()
            && self.blocking_coalitions.is_empty()
            && self.ir_violations.is_empty()
            && self.ce_violations.is_empty()
            && !self.pareto_improvement_found
    }
}

/// One contract as an ES sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Item {
    mu: usize,
    a: f64,
    price: f64,
    cost: f64,
    margin: f64,
}

/// Read-only view of a futures outcome with everything the auditors need.
struct FuturesView<'a> {
    scenario: &'a Scenario,
    out: &'a FuturesOutcome,
    pairs: Vec<Vec<PairTerms>>,
    risk: bool,
    supply: Vec<usize>,
    cap: Vec<usize>,
    blocked: BTreeSet<(usize, usize)>,
    withdrawn_mu: Vec<bool>,
    withdrawn_es: Vec<bool>,
}

impl<'a> FuturesView<'a> {
    fn new(scenario: &'a Scenario, out: &'a FuturesOutcome) -> Self {
        let p = &scenario.params;
        let supply: Vec<usize> = (0..scenario.ess.len()).map(|j| scenario.ess[j].g_e + out.booked_count(j)).collect();
        let mut withdrawn_es = vec![false; scenario.ess.len()];
        for &j in &out.withdrawn_ess {
            withdrawn_es[j] = true;
        }
        let mut withdrawn_mu = vec![false; scenario.mus.len()];
        for &i in &out.withdrawn_mus {
            withdrawn_mu[i] = true;
        }
        FuturesView {
            scenario,
            out,
            pairs: futures_pairs(scenario, out.risk_mode),
            risk: out.risk_mode.on(),
            cap: (0..scenario.ess.len())
                .map(|j| if withdrawn_es[j] { 0 } else { p.overbooked(supply[j]).min(p.overbooked(scenario.ess[j].k_e)) })
                .collect(),
            supply,
            blocked: out.blocked_pairs.iter().copied().collect(),
            withdrawn_mu,
            withdrawn_es,
        }
    }

    fn pair(&self, mu: usize, es: usize) -> Option<&PairTerms> {
        self.pairs[mu].iter().find(|t| t.es == es)
    }

    fn open(&self, mu: usize, es: usize) -> bool {
        !self.withdrawn_mu[mu] && !self.withdrawn_es[es] && !self.blocked.contains(&(mu, es)) && self.pair(mu, es).is_some()
    }

    fn final_price(&self, mu: usize, t: &PairTerms) -> f64 {
        self.out.mu_level[mu].min(t.cap)
    }

    fn item(&self, mu: usize, es: usize, price: f64) -> Item {
        let t = self.pair(mu, es).expect("pair exists");
        let a = self.scenario.mus[mu].a;
        Item { mu, a, price, cost: t.cost, margin: es_margin(a, price, t.cost, &self.scenario.params) }
    }

    fn held(&self, es: usize) -> Vec<Item> {
        self.out.omega[es]
            .iter()
            .map(|&mu| {
                let c = self.out.contract_of(mu).expect("contract for held MU");
                self.item(mu, es, c.price)
            })
            .collect()
    }

    fn e_lambda(&self, set: &[Item], supply: usize) -> Vec<f64> {
        let entries: Vec<VolunteerEntry> = set.iter().map(|x| VolunteerEntry { mu: x.mu, a: x.a, utility: x.margin }).collect();
        volunteer_probability(&entries, supply as i64).expect("supply is non-negative")
    }

    /// ES-side acceptability of a contract set.
    fn es_feasible(&self, es: usize, set: &[Item]) -> bool {
        if set.len() > self.cap[es] {
            return false;
        }
        if set.iter().any(|x| x.margin <= 0.0 || x.price < x.cost - 1e-12) {
            return false;
        }
        if self.risk {
            let probs: Vec<f64> = set.iter().map(|x| x.a).collect();
            if participation_tail_prob(&probs, self.supply[es]) > self.scenario.params.rho[3] + RISK_TOL {
                return false;
            }
        }
        true
    }

    /// MU-side acceptability of joining `set` (which contains `mu`) at ES `es`.
    fn mu_accepts(&self, es: usize, mu: usize, set: &[Item]) -> bool {
        if !self.risk {
            return true;
        }
        let pos = set.iter().position(|x| x.mu == mu).expect("mu in set");
        let lambda = self.e_lambda(set, self.supply[es])[pos];
        let p = &self.scenario.params;
        let t = self.pair(mu, es).expect("pair");
        let terms = ContractTermsUE { mu, es, price: set[pos].price, q_ue: p.q_ue, q_eu: p.q_eu };
        mu_expected_utility_and_risks(self.scenario.mus[mu].a, &terms, t.e_v, lambda, p).is_ok_and(|a| a.feasible)
    }
}

/// Subsets to try removing from a held set of size `n`: all of them up to
/// `cap`, single removals beyond. The empty removal comes first.
fn removal_sets(n: usize, cap: usize) -> Vec<Vec<usize>> {
    if n <= cap {
        (0u64..(1u64 << n)).map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect()).collect()
    } else {
        std::iter::once(Vec::new()).chain((0..n).map(|i| vec![i])).collect()
    }
}

/// Blocking pairs of a futures outcome.
pub fn find_blocking_pairs(scenario: &Scenario, out: &FuturesOutcome, opts: &AuditOptions) -> Vec<BlockingPair> {
    let v = FuturesView::new(scenario, out);
    let mut found = Vec::new();
    for (i, opts_i) in v.pairs.iter().enumerate() {
        let current = out.mu_es[i].map(|j| {
            let c = out.contract_of(i).expect("contract");
            v.pair(i, j).expect("pair").e_v - c.price
        });
        for t in opts_i {
            let j = t.es;
            if out.mu_es[i] == Some(j) || !v.open(i, j) {
                continue;
            }
            let price = v.final_price(i, t);
            // MU side: strictly better than what it holds.
            if current.is_some_and(|k| t.e_v - price <= k + opts.tol) {
                continue;
            }
            let held = v.held(j);
            let base: f64 = held.iter().map(|x| x.margin).sum();
            let new = v.item(i, j, price);
            for drop in removal_sets(held.len(), opts.subset_cap) {
                let mut set: Vec<Item> = held.iter().enumerate().filter(|(k, _)| !drop.contains(k)).map(|(_, x)| *x).collect();
                set.push(new);
                let gain = set.iter().map(|x| x.margin).sum::<f64>() - base;
                if gain > opts.tol && v.es_feasible(j, &set) && v.mu_accepts(j, i, &set) {
                    found.push(BlockingPair { mu: i, es: j, kind: if drop.is_empty() { 2 } else { 1 } });
                    break;
                }
            }
        }
    }
    found
}

/// ES-side utility view used by the coalition and Pareto auditors.
fn es_utility(v: &FuturesView<'_>, es: usize, set: &[Item], slots: &[(SlotKey, f64)], supply: usize) -> (f64, bool) {
    let p = &v.scenario.params;
    let lambda = v.e_lambda(set, supply);
    let mu_side: f64 = set
        .iter()
        .zip(&lambda)
        .map(|(x, l)| x.a * (1.0 - l) * (x.price - x.cost) + (1.0 - x.a) * p.q_ue - x.a * l * p.q_eu)
        .sum();
    let probs: Vec<f64> = set.iter().map(|x| x.a).collect();
    let keys: Vec<SlotKey> = slots.iter().map(|s| s.0).collect();
    let beta = fulfillment_probability(&probs, v.scenario.ess[es].g_e, &keys);
    let slot_cost = set.iter().map(|x| x.cost).fold(0.0, f64::max);
    let cs_side: f64 = keys
        .iter()
        .zip(&beta)
        .map(|(k, b)| -b * (k.price - slot_cost) - (1.0 - b) * p.q_ec)
        .sum();
    let r1 = beta.iter().map(|b| 1.0 - b).fold(0.0, f64::max);
    let r2 = participation_tail_prob(&probs, supply);
    let ok = !v.risk || (r1 <= p.rho[2] + RISK_TOL && r2 <= p.rho[3] + RISK_TOL);
    (mu_side + cs_side, ok)
}

/// Booked slots as (key, r_max) per ES.
fn booked(v: &FuturesView<'_>, es: usize) -> Vec<(SlotKey, f64)> {
    v.out
        .slots
        .iter()
        .filter(|s| s.es == es && s.status == SlotStatus::Booked)
        .map(|s| (SlotKey { cs: s.cs.expect("booked"), index: s.index, price: s.price }, s.r_max))
        .collect()
}

/// CS utility and feasibility with the given slots per ES and attendance probabilities per ES.
fn cs_utility(v: &FuturesView<'_>, k: usize, probs: &[Vec<f64>], slots: &[Vec<(SlotKey, f64)>]) -> (f64, bool) {
    let p = &v.scenario.params;
    let cs = &v.scenario.css[k];
    let demands: Vec<EsDemand> = probs
        .iter()
        .enumerate()
        .map(|(j, pr)| EsDemand { pmf: attendance_pmf(pr), g_e: v.scenario.ess[j].g_e })
        .collect();
    let mut cs_slots = Vec::new();
    for (j, list) in slots.iter().enumerate() {
        let keys: Vec<SlotKey> = list.iter().map(|s| s.0).collect();
        let order = crate::expectation::slot_ranking(&keys);
        let mut rank = vec![0; keys.len()];
        for (r, &pos) in order.iter().enumerate() {
            rank[pos] = r;
        }
        let beta = fulfillment_probability(&probs[j], v.scenario.ess[j].g_e, &keys);
        for (pos, s) in list.iter().enumerate() {
            if s.0.cs == k {
                cs_slots.push(CsSlot { demand: j, rank: rank[pos], price: s.0.price, cost: cs_cost(s.1, cs, p), e_beta: beta[pos] });
            }
        }
    }
    let a = cs_expected_utility_and_risk(cs, &demands, &cs_slots, p);
    (a.utility, cs_slots.len() <= cs.g_c && (!v.risk || a.feasible))
}

/// Blocking coalitions of one CS with up to `coalition_size` ESs: each ES
/// places at least one of its never-booked slot requests at the CS at its
/// ceiling p_max, the CS may drop some of its current slots, and every
/// member ends strictly better off while staying within its risk limits.
pub fn find_blocking_coalitions(scenario: &Scenario, out: &FuturesOutcome, opts: &AuditOptions) -> Vec<BlockingCoalition> {
    let v = FuturesView::new(scenario, out);
    let n_es = scenario.ess.len();
    let probs: Vec<Vec<f64>> = (0..n_es).map(|j| out.omega[j].iter().map(|&m| scenario.mus[m].a).collect()).collect();
    let slots: Vec<Vec<(SlotKey, f64)>> = (0..n_es).map(|j| booked(&v, j)).collect();
    // Never-booked requests per ES, lowest index first.
    let pending: Vec<Vec<(SlotKey, f64, f64)>> = (0..n_es)
        .map(|j| {
            let mut r: Vec<_> = out
                .slots
                .iter()
                .filter(|s| s.es == j && s.status == SlotStatus::Unbooked && !v.withdrawn_es[j])
                .map(|s| (s.index, s.p_max, s.r_max))
                .collect();
            r.sort_by_key(|x| x.0);
            r.into_iter().map(|(index, p_max, r_max)| (SlotKey { cs: usize::MAX, index, price: p_max }, r_max, p_max)).collect()
        })
        .collect();
    let es_now: Vec<f64> = (0..n_es).map(|j| es_utility(&v, j, &v.held(j), &slots[j], v.supply[j]).0).collect();
    let candidates: Vec<usize> = (0..n_es).filter(|&j| !pending[j].is_empty()).collect();
    let mut found = Vec::new();
    for k in 0..scenario.css.len() {
        if out.withdrawn_css.contains(&k) {
            continue;
        }
        let (cs_now, _) = cs_utility(&v, k, &probs, &slots);
        let held_here: Vec<(usize, usize)> = (0..n_es)
            .flat_map(|j| slots[j].iter().enumerate().filter(|(_, s)| s.0.cs == k).map(move |(pos, _)| (j, pos)))
            .collect();
        for size in 1..=opts.coalition_size.min(candidates.len()) {
            for group in combinations(&candidates, size) {
                // Added slots per member: 1..=pending, lowest indices first.
                let mut counts = vec![1usize; size];
                'counts: loop {
                    for drop in removal_sets(held_here.len(), opts.subset_cap.min(8)) {
                        let mut trial = slots.clone();
                        let mut dropped: Vec<(usize, usize)> = drop.iter().map(|&d| held_here[d]).collect();
                        dropped.sort_unstable_by(|x, y| y.cmp(x));
                        for &(j, pos) in &dropped {
                            trial[j].remove(pos);
                        }
                        for (g, &j) in group.iter().enumerate() {
                            for (key, r_max, _) in &pending[j][..counts[g]] {
                                trial[j].push((SlotKey { cs: k, ..*key }, *r_max));
                            }
                        }
                        let (cs_new, cs_ok) = cs_utility(&v, k, &probs, &trial);
                        if !cs_ok || cs_new <= cs_now + opts.tol {
                            continue;
                        }
                        // Outsiders whose slots the CS drops need not agree.
                        let members_gain = group.iter().all(|&j| {
                            let supply = scenario.ess[j].g_e + trial[j].len();
                            let (u, ok) = es_utility(&v, j, &v.held(j), &trial[j], supply);
                            ok && u > es_now[j] + opts.tol
                        });
                        if members_gain {
                            found.push(BlockingCoalition { cs: k, ess: group.clone(), kind: if drop.is_empty() { 2 } else { 1 } });
                            break 'counts;
                        }
                    }
                    // Next count vector.
                    let mut g = 0;
                    loop {
                        if g == size {
                            break 'counts;
                        }
                        if counts[g] < pending[group[g]].len() {
                            counts[g] += 1;
                            break;
                        }
                        counts[g] = 1;
                        g += 1;
                    }
                }
            }
        }
    }
    found
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn go(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            go(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Price bounds, risk thresholds and the overbooking cap.
pub fn check_individual_rationality(scenario: &Scenario, out: &FuturesOutcome, opts: &AuditOptions) -> Vec<String> {
    let v = FuturesView::new(scenario, out);
    let p = &scenario.params;
    let mut bad = Vec::new();
    for (j, es) in scenario.ess.iter().enumerate() {
        let n = out.omega[j].len();
        let limit = p.overbooked(v.supply[j]).min(p.overbooked(es.k_e));
        if n > limit {
            bad.push(format!("ES {j} holds {n} contracts over its overbooking cap {limit}"));
        }
    }
    for c in &out.ue_contracts {
        let Some(t) = v.pair(c.mu, c.es) else {
            bad.push(format!("contract ({}, {}) is not an admissible pair", c.mu, c.es));
            continue;
        };
        if c.price < t.cost - opts.tol {
            bad.push(format!("MU {} pays {} below ES {} cost {}", c.mu, c.price, c.es, t.cost));
        }
        if c.price > t.e_v + opts.tol {
            bad.push(format!("MU {} pays {} above its expected value {}", c.mu, c.price, t.e_v));
        }
    }
    for c in &out.ec_contracts {
        let s = out.slots.iter().find(|s| s.es == c.es && s.index == c.task).expect("slot record");
        let cost = cs_cost(s.r_max, &scenario.css[c.cs], p);
        if c.price < cost - opts.tol {
            bad.push(format!("slot ({}, {}) priced {} below CS {} cost {}", c.es, c.task, c.price, c.cs, cost));
        }
        if c.price > s.p_max + opts.tol {
            bad.push(format!("slot ({}, {}) priced {} above its ceiling {}", c.es, c.task, c.price, s.p_max));
        }
    }
    for k in 0..scenario.css.len() {
        let n = out.slots.iter().filter(|s| s.cs == Some(k) && s.status == SlotStatus::Booked).count();
        if n > scenario.css[k].g_c {
            bad.push(format!("CS {k} sold {n} slots on {} VMs", scenario.css[k].g_c));
        }
    }
    if !v.risk {
        return bad;
    }
    for j in 0..scenario.ess.len() {
        let held = v.held(j);
        if held.is_empty() {
            continue;
        }
        let lambda = v.e_lambda(&held, v.supply[j]);
        for (x, l) in held.iter().zip(&lambda) {
            if (l - out.e_lambda[x.mu]).abs() > 1e-9 {
                bad.push(format!("MU {} reports E[lambda] {} but recomputes to {l}", x.mu, out.e_lambda[x.mu]));
            }
            let t = v.pair(x.mu, j).expect("pair");
            let terms = ContractTermsUE { mu: x.mu, es: j, price: x.price, q_ue: p.q_ue, q_eu: p.q_eu };
            match mu_expected_utility_and_risks(x.a, &terms, t.e_v, *l, p) {
                Ok(a) if a.feasible => {}
                Ok(a) => bad.push(format!(
                    "MU {} risks R1={} R2={} exceed thresholds",
                    x.mu,
                    a.risk.r1_u.unwrap_or(0.0),
                    l
                )),
                Err(e) => bad.push(format!("MU {}: {e}", x.mu)),
            }
        }
        let probs: Vec<f64> = held.iter().map(|x| x.a).collect();
        let r2 = participation_tail_prob(&probs, v.supply[j]);
        if r2 > p.rho[3] + RISK_TOL {
            bad.push(format!("ES {j} overload risk {r2} above {}", p.rho[3]));
        }
        let keys: Vec<SlotKey> = booked(&v, j).into_iter().map(|s| s.0).collect();
        for (key, b) in keys.iter().zip(fulfillment_probability(&probs, scenario.ess[j].g_e, &keys)) {
            if 1.0 - b > p.rho[2] + RISK_TOL {
                bad.push(format!("ES {j} slot {} at CS {} goes unused with probability {}", key.index, key.cs, 1.0 - b));
            }
        }
    }
    let probs: Vec<Vec<f64>> = (0..scenario.ess.len()).map(|j| out.omega[j].iter().map(|&m| scenario.mus[m].a).collect()).collect();
    let slots: Vec<Vec<(SlotKey, f64)>> = (0..scenario.ess.len()).map(|j| booked(&v, j)).collect();
    for k in 0..scenario.css.len() {
        if !slots.iter().flatten().any(|s| s.0.cs == k) {
            continue;
        }
        let (_, ok) = cs_utility(&v, k, &probs, &slots);
        if !ok {
            bad.push(format!("CS {k} overflow risk above {}", p.rho[4]));
        }
    }
    bad
}

/// Equilibrium prices: every unmatched MU sits at its ceiling at every open
/// ES, every never-booked slot request at its ceiling p_max, and every held
/// contract at or below min(level, cap).
pub fn check_competitive_equilibrium(scenario: &Scenario, out: &FuturesOutcome, opts: &AuditOptions) -> Vec<String> {
    let v = FuturesView::new(scenario, out);
    let mut bad = Vec::new();
    for i in 0..scenario.mus.len() {
        if v.withdrawn_mu[i] {
            continue;
        }
        match out.mu_es[i] {
            None => {
                for t in &v.pairs[i] {
                    if v.open(i, t.es) && v.final_price(i, t) < t.cap - opts.tol {
                        bad.push(format!("unmatched MU {i} stopped at {} below its ceiling {} at ES {}", v.final_price(i, t), t.cap, t.es));
                    }
                }
            }
            Some(j) => {
                let c = out.contract_of(i).expect("contract");
                let t = v.pair(i, j).expect("pair");
                // Held prices lag the clock but never lead it.
                if c.price > v.final_price(i, t) + opts.tol {
                    bad.push(format!("MU {i} holds price {} above its level {}", c.price, v.final_price(i, t)));
                }
            }
        }
    }
    for s in out.slots.iter().filter(|s| s.status == SlotStatus::Unbooked && !v.withdrawn_es[s.es]) {
        if s.price < s.p_max - opts.tol {
            bad.push(format!("unbooked slot ({}, {}) stopped at {} below p_max {}", s.es, s.index, s.price, s.p_max));
        }
    }
    bad
}

/// Exhaustive search over alternative MU→ES assignments at the final prices,
/// slots fixed. A witness leaves every MU, ES and CS weakly better off and
/// raises expected social welfare. Returns None when the instance is too big.
pub fn check_pareto_improvement(scenario: &Scenario, out: &FuturesOutcome, opts: &AuditOptions) -> Option<Option<ParetoWitness>> {
    if scenario.mus.len() > opts.pareto_max_mus || scenario.ess.len() > opts.pareto_max_ess || scenario.css.len() > opts.pareto_max_css {
        return None;
    }
    let v = FuturesView::new(scenario, out);
    let p = &scenario.params;
    let n_mu = scenario.mus.len();
    let n_es = scenario.ess.len();
    let slots: Vec<Vec<(SlotKey, f64)>> = (0..n_es).map(|j| booked(&v, j)).collect();

    // Expected utilities of one ES's MUs and of the ES itself for a given member set.
    let eval = |j: usize, set: &[Item]| -> Option<(Vec<(usize, f64)>, f64)> {
        if !v.es_feasible(j, set) && !set.is_empty() {
            return None;
        }
        let lambda = v.e_lambda(set, v.supply[j]);
        let mut mus = Vec::new();
        for (x, l) in set.iter().zip(&lambda) {
            let t = v.pair(x.mu, j)?;
            let terms = ContractTermsUE { mu: x.mu, es: j, price: x.price, q_ue: p.q_ue, q_eu: p.q_eu };
            let a = mu_expected_utility_and_risks(x.a, &terms, t.e_v, *l, p).ok()?;
            if v.risk && !a.feasible {
                return None;
            }
            mus.push((x.mu, a.utility));
        }
        let (u, ok) = es_utility(&v, j, set, &slots[j], v.supply[j]);
        (ok || set.is_empty()).then_some((mus, u))
    };
    let sets_of = |assign: &[Option<usize>]| -> Vec<Vec<Item>> {
        let mut sets = vec![Vec::new(); n_es];
        for (i, a) in assign.iter().enumerate() {
            if let Some(j) = *a {
                let price = match out.mu_es[i] {
                    Some(h) if h == j => out.contract_of(i).expect("contract").price,
                    _ => v.final_price(i, v.pair(i, j).expect("pair")),
                };
                sets[j].push(v.item(i, j, price));
            }
        }
        sets
    };
    let score = |assign: &[Option<usize>]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let sets = sets_of(assign);
        let mut mu_u = vec![0.0; n_mu];
        let mut es_u = vec![0.0; n_es];
        for j in 0..n_es {
            let (mus, u) = eval(j, &sets[j])?;
            for (i, x) in mus {
                mu_u[i] = x;
            }
            es_u[j] = u;
        }
        let probs: Vec<Vec<f64>> = sets.iter().map(|s| s.iter().map(|x| x.a).collect()).collect();
        let mut cs_u = vec![0.0; scenario.css.len()];
        for (k, u) in cs_u.iter_mut().enumerate() {
            let (x, ok) = cs_utility(&v, k, &probs, &slots);
            if !ok && slots.iter().flatten().any(|s| s.0.cs == k) {
                return None;
            }
            *u = x;
        }
        Some((mu_u, es_u, cs_u))
    };
    let (mu0, es0, cs0) = score(&out.mu_es).unwrap_or_else(|| {
        // An infeasible incumbent is an IR failure; compare against zero utilities.
        (vec![0.0; n_mu], vec![0.0; n_es], vec![0.0; scenario.css.len()])
    });
    let sw0: f64 = mu0.iter().chain(&es0).chain(&cs0).sum();
    let choices: Vec<Vec<Option<usize>>> = (0..n_mu)
        .map(|i| std::iter::once(None).chain(v.pairs[i].iter().filter(|t| v.open(i, t.es)).map(|t| Some(t.es))).collect())
        .collect();
    let mut idx = vec![0usize; n_mu];
    loop {
        let assign: Vec<Option<usize>> = (0..n_mu).map(|i| choices[i][idx[i]]).collect();
        if assign != out.mu_es {
            if let Some((mu1, es1, cs1)) = score(&assign) {
                let weakly = mu1.iter().zip(&mu0).chain(es1.iter().zip(&es0)).chain(cs1.iter().zip(&cs0)).all(|(a, b)| *a >= b - opts.tol);
                let sw1: f64 = mu1.iter().chain(&es1).chain(&cs1).sum();
                if weakly && sw1 > sw0 + opts.tol {
                    return Some(Some(ParetoWitness { assignment: assign, sw_gain: sw1 - sw0 }));
                }
            }
        }
        let mut i = 0;
        loop {
            if i == n_mu {
                return Some(None);
            }
            idx[i] += 1;
            if idx[i] < choices[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Every futures auditor.
pub fn audit_futures(scenario: &Scenario, out: &FuturesOutcome, opts: AuditOptions) -> AuditReport {
    let pareto = check_pareto_improvement(scenario, out, &opts);
    AuditReport {
        blocking_pairs: find_blocking_pairs(scenario, out, &opts),
        blocking_coalitions: find_blocking_coalitions(scenario, out, &opts),
        ir_violations: check_individual_rationality(scenario, out, &opts),
        ce_violations: check_competitive_equilibrium(scenario, out, &opts),
        pareto_improvement_found: matches!(pareto, Some(Some(_))),
        pareto_checked: pareto.is_some(),
        pareto_witness: pareto.flatten(),
        subset_cap: opts.subset_cap,
        coalition_size: opts.coalition_size,
    }
}

/// Spot-market auditors on realized values. ES capacity is its final spot
/// supply; slots are audited as a second layer (an unbooked slot plus a CS
/// that would now take it at its ceiling is a blocking pair of that layer).
pub fn audit_spot(scenario: &Scenario, market: &SpotMarket, out: &SpotOutcome, opts: AuditOptions) -> AuditReport {
    let p = &scenario.params;
    let mut report = AuditReport { subset_cap: opts.subset_cap, coalition_size: opts.coalition_size, ..Default::default() };
    let assigned: Vec<Option<&crate::spot::SpotAssignment>> = market.mus.iter().map(|m| out.assignment_of(m.mu)).collect();
    let held: Vec<Vec<(usize, f64)>> = (0..market.ess.len())
        .map(|j| {
            market
                .mus
                .iter()
                .zip(&assigned)
                .filter_map(|(m, a)| {
                    let a = (*a)?;
                    (a.es == j).then(|| {
                        let o = m.options.iter().find(|o| o.es == j).expect("option");
                        (m.mu, a.price - o.cost)
                    })
                })
                .collect()
        })
        .collect();
    for (b, m) in market.mus.iter().enumerate() {
        let current = assigned[b].map(|a| {
            let o = m.options.iter().find(|o| o.es == a.es).expect("option");
            o.value - a.price
        });
        for o in m.options.iter().filter(|o| o.value >= p.p_min_ue) {
            let price = out.mu_level[b].min(o.value);
            match assigned[b] {
                Some(a) if a.es == o.es => {
                    if a.price > o.value + opts.tol || a.price < o.cost - opts.tol {
                        report.ir_violations.push(format!("spot MU {} pays {} outside [{}, {}]", m.mu, a.price, o.cost, o.value));
                    }
                    continue;
                }
                None if price < o.value - opts.tol => {
                    report.ce_violations.push(format!("unmatched spot MU {} stopped at {price} below {}", m.mu, o.value));
                }
                _ => {}
            }
            if current.is_some_and(|k| o.value - price <= k + opts.tol) {
                continue;
            }
            let margin = price - o.cost;
            let list = &held[o.es];
            let base: f64 = list.iter().map(|x| x.1).sum();
            for drop in removal_sets(list.len(), opts.subset_cap) {
                let kept: Vec<f64> = list.iter().enumerate().filter(|(k, _)| !drop.contains(k)).map(|(_, x)| x.1).collect();
                let fits = kept.len() < out.es_supply[o.es] && kept.iter().all(|&x| x > 0.0) && margin > 0.0;
                if fits && kept.iter().sum::<f64>() + margin > base + opts.tol {
                    report.blocking_pairs.push(BlockingPair { mu: m.mu, es: o.es, kind: if drop.is_empty() { 2 } else { 1 } });
                    break;
                }
            }
        }
    }
    for (j, e) in market.ess.iter().enumerate() {
        let n = held[j].len();
        let cloud = out.assignments.iter().filter(|a| a.es == j && a.cloud.is_some()).count();
        if n > e.room || n - cloud > e.free_local {
            report.ir_violations.push(format!("spot ES {j} serves {n} ({cloud} via cloud) beyond its residual capacity"));
        }
    }
    for a in out.assignments.iter().filter(|a| a.cloud.is_some()) {
        let (k, slot_price) = a.cloud.expect("cloud");
        let cost = cs_cost(scenario.mus[a.mu].r_u, &scenario.css[k], p);
        if slot_price > a.price + opts.tol || slot_price < cost - opts.tol {
            report.ir_violations.push(format!("spot slot for MU {} priced {slot_price} outside [{cost}, {}]", a.mu, a.price));
        }
    }
    // Slot layer.
    let booked_at = |k: usize| out.slots.iter().filter(|s| s.cs == Some(k) && s.status == SpotSlotStatus::Booked).count();
    // A slot with no CS left to ask never entered the auction.
    let any_seller = market.cs_free.iter().any(|&f| f > 0);
    for s in out.slots.iter().filter(|s| any_seller && s.status == SpotSlotStatus::Unbooked) {
        if s.price < s.cap - opts.tol {
            report.ce_violations.push(format!("unbooked spot slot ({}, {}) stopped at {} below {}", s.es, s.index, s.price, s.cap));
        }
        for (k, c) in scenario.css.iter().enumerate() {
            let m = s.cap - cs_cost(s.r_u, c, p);
            if market.cs_free[k] == 0 || m <= opts.tol {
                continue;
            }
            let weakest = out
                .slots
                .iter()
                .filter(|t| t.cs == Some(k) && t.status == SpotSlotStatus::Booked)
                .map(|t| t.price - cs_cost(t.r_u, c, p))
                .fold(f64::INFINITY, f64::min);
            if booked_at(k) < market.cs_free[k] || weakest < m - opts.tol {
                report.blocking_coalitions.push(BlockingCoalition { cs: k, ess: vec![s.es], kind: if booked_at(k) < market.cs_free[k] { 2 } else { 1 } });
            }
        }
    }
    report
}
