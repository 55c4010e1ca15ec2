//! Futures market: forward contracts signed against expectations.
//!
//! Phase 1 matches MUs to ESs, Phase 2 lets ESs that overbooked past
//! (1+τ)G buy cloud slots, and Phase 3 reconciles the two layers: slots
//! unlikely to be used are released, contract sets are trimmed to
//! (1+τ)(G + slots), the MU auction resumes for trimmed MUs, and any party
//! whose risks still exceed its thresholds withdraws.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::auction::{Auction, Bid, ChoiceRule, Opt};
use crate::error::{MarketError, Result};
use crate::expectation::{
    attendance_pmf, cs_cost, cs_expected_utility_and_risk, es_cost, es_expected_utility_and_risks, es_margin,
    expected_valuation, mu_expected_utility_and_risks, pair_cap, participation_tail_prob, pmf_push, pmf_tail,
    slot_ranking, volunteer_probability, ContractTermsEC, ContractTermsUE, CsSlot, EsContractTerms, EsDemand,
    EsSlotTerms, SlotKey, VolunteerEntry, RISK_TOL,
};
use crate::model::Scenario;
use crate::params::MarketParams;

const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    #[default]
    Enforced,
    /// Every risk check passes; price ceilings stay at E[v].
    Ignored,
}

impl RiskMode {
    pub fn on(self) -> bool {
        self == RiskMode::Enforced
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Booked,
    /// Never accepted by any CS during Phase 2.
    Unbooked,
    /// Given up by its ES in Phase 3.
    Released,
    /// Dropped because its CS or ES withdrew.
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub es: usize,
    pub index: usize,
    pub cs: Option<usize>,
    /// Booked price, or the final offer level when not booked.
    pub price: f64,
    pub p_max: f64,
    pub r_max: f64,
    pub status: SlotStatus,
    /// Settlement rank among the ES's booked slots (booked slots only).
    pub rank: Option<usize>,
    pub e_beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEntry {
    pub party: String,
    pub id: usize,
    pub risk: String,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FuturesOutcome {
    pub risk_mode: RiskMode,
    /// ω(b_i): the ES each MU contracted with.
    pub mu_es: Vec<Option<usize>>,
    /// ω(s_j): contractual MUs per ES, ascending.
    pub omega: Vec<Vec<usize>>,
    pub ue_contracts: Vec<ContractTermsUE>,
    pub ec_contracts: Vec<ContractTermsEC>,
    /// φ(s_j): CSs holding at least one of the ES's slots.
    pub phi: Vec<Vec<usize>>,
    /// |B_{j,k}| keyed by (es, cs).
    pub offload_sets: BTreeMap<(usize, usize), usize>,
    pub slots: Vec<SlotRecord>,
    /// E[λ] per MU (zero without a contract).
    pub e_lambda: Vec<f64>,
    /// Final Phase-1 price level per MU.
    pub mu_level: Vec<f64>,
    /// (mu, es) pairs closed by an R2 notification or a withdrawal.
    pub blocked_pairs: Vec<(usize, usize)>,
    pub withdrawn_mus: Vec<usize>,
    pub withdrawn_ess: Vec<usize>,
    pub withdrawn_css: Vec<usize>,
    pub rounds_phase1: u32,
    pub rounds_phase2: u32,
    pub rounds_phase3: u32,
    pub phase1_bound: u32,
    pub phase2_bound: u32,
    /// MU↔ES interactions over all phases.
    pub interactions: u64,
    /// Proposal exchanges each MU made; feeds decision latency.
    pub mu_exchanges: Vec<u32>,
    pub risk_table: Vec<RiskEntry>,
}

impl FuturesOutcome {
    /// No contracts at all; what the spot-only mechanism starts from.
    pub fn empty(scenario: &Scenario) -> Self {
        FuturesOutcome {
            mu_es: vec![None; scenario.mus.len()],
            omega: vec![Vec::new(); scenario.ess.len()],
            phi: vec![Vec::new(); scenario.ess.len()],
            e_lambda: vec![0.0; scenario.mus.len()],
            mu_level: vec![scenario.params.p_min_ue; scenario.mus.len()],
            mu_exchanges: vec![0; scenario.mus.len()],
            ..Default::default()
        }
    }

    pub fn contract_of(&self, mu: usize) -> Option<&ContractTermsUE> {
        self.ue_contracts.iter().find(|c| c.mu == mu)
    }

    /// Booked slots of `es` in settlement order.
    pub fn booked_slots(&self, es: usize) -> Vec<&SlotRecord> {
        let mut v: Vec<&SlotRecord> = self
            .slots
            .iter()
            .filter(|s| s.es == es && s.status == SlotStatus::Booked)
            .collect();
        v.sort_by_key(|s| s.rank);
        v
    }

    pub fn booked_count(&self, es: usize) -> usize {
        self.slots.iter().filter(|s| s.es == es && s.status == SlotStatus::Booked).count()
    }
}

/// One MU↔ES pair that survives the static filters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    pub es: usize,
    pub e_v: f64,
    pub cap: f64,
    pub cost: f64,
}

/// Candidate pairs per MU: price ceiling at or above the opening price and the ES's cost.
pub(crate) fn futures_pairs(scenario: &Scenario, risk: RiskMode) -> Vec<Vec<PairTerms>> {
    let p = &scenario.params;
    scenario
        .mus
        .iter()
        .map(|mu| {
            mu.candidates
                .iter()
                .map(|&j| {
                    let es = &scenario.ess[j];
                    PairTerms {
                        es: j,
                        e_v: expected_valuation(mu, es, p),
                        cap: pair_cap(mu, es, p, risk.on()),
                        cost: es_cost(mu, es, p),
                    }
                })
                .filter(|t| t.cap >= p.p_min_ue && t.cap >= t.cost)
                .collect()
        })
        .collect()
}

/// One proposal as the ES sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub mu: usize,
    pub a: f64,
    pub price: f64,
    pub cost: f64,
}

/// Max-margin contract set under |S| ≤ cap and, when `rho` is set,
/// Pr(attendance > supply) ≤ rho. Exact branch and bound; items are scanned
/// by margin descending then id, and a set replaces the incumbent only when
/// strictly better, so ties resolve toward higher-ranked MUs.
pub fn best_contract_set(
    proposals: &[Proposal],
    cap: usize,
    supply: usize,
    rho: Option<f64>,
    params: &MarketParams,
) -> Vec<usize> {
    let mut items: Vec<(usize, f64, f64)> = proposals
        .iter()
        .filter(|p| p.price >= p.cost - EPS)
        .map(|p| (p.mu, es_margin(p.a, p.price, p.cost, params), p.a))
        .filter(|x| x.1 > 0.0)
        .collect();
    items.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut prefix = vec![0.0];
    for it in &items {
        prefix.push(prefix.last().unwrap() + it.1);
    }
    struct Search<'a> {
        items: &'a [(usize, f64, f64)],
        prefix: &'a [f64],
        cap: usize,
        supply: usize,
        rho: Option<f64>,
        chosen: Vec<usize>,
        best: Vec<usize>,
        best_sum: f64,
    }
    impl Search<'_> {
        fn go(&mut self, pos: usize, sum: f64, pmf: &[f64]) {
            if sum > self.best_sum + EPS {
                self.best_sum = sum;
                self.best = self.chosen.clone();
            }
            let n = self.items.len();
            if pos == n || self.chosen.len() == self.cap {
                return;
            }
            let room = (self.cap - self.chosen.len()).min(n - pos);
            if sum + self.prefix[pos + room] - self.prefix[pos] <= self.best_sum + EPS {
                return;
            }
            let (mu, m, a) = self.items[pos];
            let next = pmf_push(pmf, a);
            if self.rho.is_none_or(|r| pmf_tail(&next, self.supply) <= r + RISK_TOL) {
                self.chosen.push(mu);
                self.go(pos + 1, sum + m, &next);
                self.chosen.pop();
            }
            self.go(pos + 1, sum, pmf);
        }
    }
    let mut s = Search {
        items: &items,
        prefix: &prefix,
        cap,
        supply,
        rho,
        chosen: Vec::new(),
        best: Vec::new(),
        best_sum: 0.0,
    };
    s.go(0, 0.0, &[1.0]);
    let mut best = s.best;
    best.sort_unstable();
    best
}

/// ES choice over incoming proposals plus E[λ] for the kept MUs at the given supply.
pub fn es_accept_set(
    proposals: &[Proposal],
    capacity_cap: usize,
    supply: usize,
    params: &MarketParams,
    risk: RiskMode,
) -> (Vec<usize>, Vec<(usize, f64)>) {
    let rho = risk.on().then_some(params.rho[3]);
    let kept = best_contract_set(proposals, capacity_cap, supply, rho, params);
    let entries: Vec<VolunteerEntry> = kept
        .iter()
        .map(|m| {
            let p = proposals.iter().find(|p| p.mu == *m).expect("kept from proposals");
            VolunteerEntry { mu: p.mu, a: p.a, utility: es_margin(p.a, p.price, p.cost, params) }
        })
        .collect();
    let lambda = volunteer_probability(&entries, supply as i64).expect("supply is non-negative");
    let e_lambda = entries.iter().zip(lambda).map(|(e, l)| (e.mu, l)).collect();
    (kept, e_lambda)
}

/// C_i ordered by expected utility at the given prices and E[λ]; infeasible ESs dropped.
/// `prices` and `e_lambda` are aligned with the MU's candidate list.
pub fn mu_preference_list(mu: usize, scenario: &Scenario, prices: &[f64], e_lambda: &[f64]) -> Vec<usize> {
    let p = &scenario.params;
    let m = &scenario.mus[mu];
    let mut ranked: Vec<(usize, f64)> = m
        .candidates
        .iter()
        .enumerate()
        .filter_map(|(slot, &j)| {
            let es = &scenario.ess[j];
            let e_v = expected_valuation(m, es, p);
            let terms = ContractTermsUE { mu, es: j, price: prices[slot], q_ue: p.q_ue, q_eu: p.q_eu };
            let a = mu_expected_utility_and_risks(m.a, &terms, e_v, e_lambda[slot], p).ok()?;
            (a.feasible && prices[slot] <= e_v).then_some((j, a.utility))
        })
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.into_iter().map(|(j, _)| j).collect()
}

/// CS order for one of ES `es`'s slots: by the ES's expected slot utility
/// -E[β](p - c^E) - (1-E[β])q_ec, ties to the lower CS id. CSs flagged in
/// `cs_blocked` (risk already failing at their current load) are dropped.
pub fn es_task_preference_list(
    prices: &[f64],
    e_beta: f64,
    es_cost: f64,
    cs_blocked: &[bool],
    params: &MarketParams,
) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = prices
        .iter()
        .enumerate()
        .filter(|(k, _)| !cs_blocked[*k])
        .map(|(k, &p)| (k, -e_beta * (p - es_cost) - (1.0 - e_beta) * params.q_ec))
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.into_iter().map(|(k, _)| k).collect()
}

pub(crate) struct EsRule<'a> {
    pub params: &'a MarketParams,
    pub a: Vec<f64>,
    pub cost: Vec<Vec<f64>>,
    pub cap: Vec<usize>,
    pub supply: Vec<usize>,
    pub risk: RiskMode,
}

impl EsRule<'_> {
    fn proposals(&self, bids: &[Bid]) -> Vec<Proposal> {
        bids.iter()
            .map(|b| Proposal { mu: b.buyer, a: self.a[b.buyer], price: b.price, cost: self.cost[b.buyer][b.opt] })
            .collect()
    }
}

impl ChoiceRule for EsRule<'_> {
    fn choose(&self, seller: usize, bids: &[Bid]) -> Vec<usize> {
        let rho = self.risk.on().then_some(self.params.rho[3]);
        best_contract_set(&self.proposals(bids), self.cap[seller], self.supply[seller], rho, self.params)
    }

    fn evict(&self, seller: usize, held: &[Bid]) -> Vec<usize> {
        if !self.risk.on() || held.is_empty() {
            return Vec::new();
        }
        let props = self.proposals(held);
        let (_, lambda) = es_accept_set(&props, usize::MAX, self.supply[seller], self.params, RiskMode::Enforced);
        lambda
            .into_iter()
            .filter(|&(_, l)| l > self.params.rho[1] + RISK_TOL)
            .map(|(mu, _)| mu)
            .collect()
    }
}

/// One Phase-2 slot request.
#[derive(Clone, Copy, Debug)]
struct SlotReq {
    es: usize,
    index: usize,
    r_max: f64,
    p_max: f64,
}

struct CsRule<'a> {
    scenario: &'a Scenario,
    reqs: &'a [SlotReq],
    demands: &'a [EsDemand],
    risk: RiskMode,
}

impl CsRule<'_> {
    fn slot(&self, k: usize, bid: &Bid) -> CsSlot {
        let r = self.reqs[bid.buyer];
        let d = &self.demands[r.es];
        CsSlot {
            demand: r.es,
            rank: r.index,
            price: bid.price,
            cost: cs_cost(r.r_max, &self.scenario.css[k], &self.scenario.params),
            e_beta: pmf_tail(&d.pmf, d.g_e + r.index),
        }
    }

    /// (utility gain over the empty set, feasible).
    fn evaluate(&self, k: usize, slots: &[CsSlot]) -> (f64, bool) {
        let cs = &self.scenario.css[k];
        let p = &self.scenario.params;
        let empty = cs_expected_utility_and_risk(cs, self.demands, &[], p);
        let a = cs_expected_utility_and_risk(cs, self.demands, slots, p);
        let feasible = slots.len() <= cs.g_c && (!self.risk.on() || a.feasible);
        (a.utility - empty.utility, feasible)
    }
}

impl ChoiceRule for CsRule<'_> {
    fn choose(&self, k: usize, bids: &[Bid]) -> Vec<usize> {
        let p = &self.scenario.params;
        let mut items: Vec<(usize, CsSlot, f64)> = bids
            .iter()
            .map(|b| {
                let s = self.slot(k, b);
                let m = s.e_beta * (s.price - s.cost) + (1.0 - s.e_beta) * p.q_ec;
                (b.buyer, s, m)
            })
            .filter(|(_, s, m)| s.price >= s.cost - EPS && *m > 0.0)
            .collect();
        items.sort_by(|x, y| {
            y.2.total_cmp(&x.2)
                .then(self.reqs[x.0].es.cmp(&self.reqs[y.0].es))
                .then(self.reqs[x.0].index.cmp(&self.reqs[y.0].index))
        });
        let mut chosen: Vec<usize> = Vec::new();
        if items.len() <= p.exact_enum_limit {
            // Exact: the overflow term makes utility non-separable, so search subsets.
            let mut best = (0.0, Vec::new());
            let mut prefix = vec![0.0];
            for it in &items {
                prefix.push(prefix.last().unwrap() + it.2);
            }
            let mut stack: Vec<usize> = Vec::new();
            self.search(k, &items, &prefix, 0, &mut stack, &mut best);
            chosen = best.1.iter().map(|&i| items[i].0).collect();
        } else {
            let mut slots: Vec<CsSlot> = Vec::new();
            let mut current = 0.0;
            for it in &items {
                slots.push(it.1);
                let (u, ok) = self.evaluate(k, &slots);
                if ok && u > current + EPS {
                    current = u;
                    chosen.push(it.0);
                } else {
                    slots.pop();
                }
            }
        }
        chosen.sort_unstable();
        chosen
    }
}

impl CsRule<'_> {
    fn search(
        &self,
        k: usize,
        items: &[(usize, CsSlot, f64)],
        prefix: &[f64],
        pos: usize,
        stack: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        let slots: Vec<CsSlot> = stack.iter().map(|&i| items[i].1).collect();
        let (u, ok) = self.evaluate(k, &slots);
        if !ok {
            return;
        }
        if u > best.0 + EPS {
            *best = (u, stack.clone());
        }
        if pos == items.len() {
            return;
        }
        // Overflow only subtracts, so the margin sum bounds any extension.
        let sep: f64 = stack.iter().map(|&i| items[i].2).sum();
        if sep + prefix[items.len()] - prefix[pos] <= best.0 + EPS {
            return;
        }
        stack.push(pos);
        self.search(k, items, prefix, pos + 1, stack, best);
        stack.pop();
        self.search(k, items, prefix, pos + 1, stack, best);
    }
}

fn round_bound(top: f64, p_min: f64, step: f64) -> u32 {
    (((top - p_min) / step).max(0.0) - 1e-9).ceil() as u32 + 1
}

/// Guard against runaway loops; far above any bound a terminating run reaches.
fn round_guard(n_buyers: usize, bound: u32) -> u32 {
    bound.saturating_mul(4).saturating_add(4 * n_buyers as u32).saturating_add(64)
}

/// State of the MU↔ES layer after Phase 1.
pub struct Phase1 {
    pub auction: Auction,
    pub pairs: Vec<Vec<PairTerms>>,
    pub rounds: u32,
    pub bound: u32,
}

pub(crate) fn es_rule<'a>(scenario: &'a Scenario, pairs: &[Vec<PairTerms>], risk: RiskMode) -> EsRule<'a> {
    let p = &scenario.params;
    EsRule {
        params: p,
        a: scenario.mus.iter().map(|m| m.a).collect(),
        cost: pairs.iter().map(|v| v.iter().map(|t| t.cost).collect()).collect(),
        cap: scenario.ess.iter().map(|e| p.overbooked(e.k_e)).collect(),
        supply: scenario.ess.iter().map(|e| e.g_e).collect(),
        risk,
    }
}

/// Phase 1: price-ascending MU→ES proposals until no MU moves.
pub fn run_phase1(scenario: &Scenario, risk: RiskMode) -> Result<Phase1> {
    let p = &scenario.params;
    let pairs = futures_pairs(scenario, risk);
    let opts: Vec<Vec<Opt>> = pairs
        .iter()
        .map(|v| v.iter().map(|t| Opt { seller: t.es, value: t.e_v, cap: t.cap }).collect())
        .collect();
    let top = pairs.iter().flatten().map(|t| t.e_v).fold(p.p_min_ue, f64::max);
    let bound = round_bound(top, p.p_min_ue, p.dp_mu);
    let mut auction = Auction::new(scenario.ess.len(), opts, p.p_min_ue, p.dp_mu);
    let rule = es_rule(scenario, &pairs, risk);
    let rounds = auction.run(&rule, round_guard(scenario.mus.len(), bound))?;
    Ok(Phase1 { auction, pairs, rounds, bound })
}

pub struct Phase2 {
    pub slots: Vec<SlotRecord>,
    pub rounds: u32,
    pub bound: u32,
}

/// Phase 2: ESs whose contract count exceeds (1+τ)G book cloud slots.
fn run_phase2_inner(scenario: &Scenario, phase1: &Phase1, risk: RiskMode) -> Result<Phase2> {
    let p = &scenario.params;
    let a = &phase1.auction;
    let mut reqs: Vec<SlotReq> = Vec::new();
    let mut demands: Vec<EsDemand> = Vec::new();
    for (j, es) in scenario.ess.iter().enumerate() {
        let held = a.held_bids_of(j);
        let probs: Vec<f64> = held.iter().map(|b| scenario.mus[b.buyer].a).collect();
        demands.push(EsDemand { pmf: attendance_pmf(&probs), g_e: es.g_e });
        let x = held.len() as f64 - (1.0 + p.tau) * es.g_e as f64;
        if x <= 1e-9 {
            continue;
        }
        let want = ((x / (1.0 + p.tau)) - 1e-9).ceil() as usize;
        let n = want.min(es.k_e - es.g_e);
        let p_max = held.iter().map(|b| b.price).fold(f64::INFINITY, f64::min);
        let r_max = held.iter().map(|b| scenario.mus[b.buyer].r_u).fold(0.0, f64::max);
        for index in 0..n {
            reqs.push(SlotReq { es: j, index, r_max, p_max });
        }
    }
    let opts: Vec<Vec<Opt>> = reqs
        .iter()
        .map(|r| (0..scenario.css.len()).map(|k| Opt { seller: k, value: 0.0, cap: r.p_max }).collect())
        .collect();
    let top = reqs.iter().map(|r| r.p_max).fold(p.p_min_ec, f64::max);
    let bound = round_bound(top, p.p_min_ec, p.dp_es);
    let mut auction = Auction::new(scenario.css.len(), opts, p.p_min_ec, p.dp_es);
    let rule = CsRule { scenario, reqs: &reqs, demands: &demands, risk };
    let rounds = auction.run(&rule, round_guard(reqs.len(), bound))?;
    let slots = reqs
        .iter()
        .enumerate()
        .map(|(b, r)| {
            let held = auction.held_at.get(b).copied().flatten();
            SlotRecord {
                es: r.es,
                index: r.index,
                cs: held.map(|(k, _, _)| k),
                price: held.map(|(_, _, pr)| pr).unwrap_or(auction.level.get(b).copied().unwrap_or(p.p_min_ec).min(r.p_max)),
                p_max: r.p_max,
                r_max: r.r_max,
                status: if held.is_some() { SlotStatus::Booked } else { SlotStatus::Unbooked },
                rank: None,
                e_beta: 0.0,
            }
        })
        .collect();
    Ok(Phase2 { slots, rounds, bound })
}

pub fn run_phase2(scenario: &Scenario, phase1: &Phase1, risk: RiskMode) -> Result<Phase2> {
    run_phase2_inner(scenario, phase1, risk)
}

/// Re-ranks each ES's booked slots and refreshes E[β] against its current contract set.
fn refresh_slots(scenario: &Scenario, auction: &Auction, slots: &mut [SlotRecord]) {
    for j in 0..scenario.ess.len() {
        let idx: Vec<usize> = (0..slots.len())
            .filter(|&s| slots[s].es == j && slots[s].status == SlotStatus::Booked)
            .collect();
        let keys: Vec<SlotKey> = idx
            .iter()
            .map(|&s| SlotKey { cs: slots[s].cs.expect("booked"), index: slots[s].index, price: slots[s].price })
            .collect();
        let probs: Vec<f64> = auction.held[j].iter().map(|&m| scenario.mus[m].a).collect();
        let pmf = attendance_pmf(&probs);
        let beta = crate::expectation::fulfillment_from_pmf(&pmf, scenario.ess[j].g_e, &keys);
        for (rank, &pos) in slot_ranking(&keys).iter().enumerate() {
            slots[idx[pos]].rank = Some(rank);
        }
        for (pos, &s) in idx.iter().enumerate() {
            slots[s].e_beta = beta[pos];
        }
    }
    for s in slots.iter_mut().filter(|s| s.status != SlotStatus::Booked) {
        s.rank = None;
        s.e_beta = 0.0;
    }
}

fn cs_view(scenario: &Scenario, auction: &Auction, slots: &[SlotRecord], k: usize) -> (Vec<EsDemand>, Vec<CsSlot>) {
    let p = &scenario.params;
    let demands: Vec<EsDemand> = scenario
        .ess
        .iter()
        .enumerate()
        .map(|(j, es)| {
            let probs: Vec<f64> = auction.held[j].iter().map(|&m| scenario.mus[m].a).collect();
            EsDemand { pmf: attendance_pmf(&probs), g_e: es.g_e }
        })
        .collect();
    let cs_slots = slots
        .iter()
        .filter(|s| s.status == SlotStatus::Booked && s.cs == Some(k))
        .map(|s| CsSlot {
            demand: s.es,
            rank: s.rank.expect("ranked"),
            price: s.price,
            cost: cs_cost(s.r_max, &scenario.css[k], p),
            e_beta: s.e_beta,
        })
        .collect();
    (demands, cs_slots)
}

fn mu_e_lambda(scenario: &Scenario, auction: &Auction, pairs: &[Vec<PairTerms>], j: usize, supply: usize) -> Vec<(usize, f64)> {
    let p = &scenario.params;
    let entries: Vec<VolunteerEntry> = auction
        .held_bids_of(j)
        .iter()
        .map(|b| {
            let a = scenario.mus[b.buyer].a;
            VolunteerEntry { mu: b.buyer, a, utility: es_margin(a, b.price, pairs[b.buyer][b.opt].cost, p) }
        })
        .collect();
    let lambda = volunteer_probability(&entries, supply as i64).expect("non-negative supply");
    entries.iter().zip(lambda).map(|(e, l)| (e.mu, l)).collect()
}

/// OA-CLM with every risk check enforced.
pub fn run_oa_clm(scenario: &Scenario) -> Result<FuturesOutcome> {
    run_oa_clm_with(scenario, RiskMode::Enforced)
}

pub fn run_oa_clm_with(scenario: &Scenario, risk: RiskMode) -> Result<FuturesOutcome> {
    scenario.validate()?;
    let p = &scenario.params;
    let n_es = scenario.ess.len();
    let mut ph1 = run_phase1(scenario, risk)?;
    let ph2 = run_phase2_inner(scenario, &ph1, risk)?;
    let mut slots = ph2.slots;
    let pairs = std::mem::take(&mut ph1.pairs);
    let mut auction = ph1.auction;
    let mut withdrawn_mus = Vec::new();
    let mut withdrawn_ess: Vec<usize> = Vec::new();
    let mut withdrawn_css: Vec<usize> = Vec::new();
    let mut rounds_phase3 = 0;
    let mut rule = es_rule(scenario, &pairs, risk);

    for _pass in 0..=(scenario.mus.len() + slots.len() + n_es + scenario.css.len() + 1) {
        let mut changed = false;
        refresh_slots(scenario, &auction, &mut slots);
        if risk.on() {
            // Give up the least-likely-used slot while any slot breaks R1^E.
            for j in 0..n_es {
                loop {
                    let worst = slots
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.es == j && s.status == SlotStatus::Booked)
                        .max_by_key(|(_, s)| s.rank)
                        .map(|(i, _)| i);
                    let breach = slots
                        .iter()
                        .any(|s| s.es == j && s.status == SlotStatus::Booked && 1.0 - s.e_beta > p.rho[2] + RISK_TOL);
                    match worst {
                        Some(i) if breach => {
                            slots[i].status = SlotStatus::Released;
                            changed = true;
                            refresh_slots(scenario, &auction, &mut slots);
                        }
                        _ => break,
                    }
                }
            }
        }
        for (j, es) in scenario.ess.iter().enumerate() {
            let supply = es.g_e + slots.iter().filter(|s| s.es == j && s.status == SlotStatus::Booked).count();
            rule.supply[j] = supply;
            rule.cap[j] = if withdrawn_ess.contains(&j) { 0 } else { p.overbooked(supply).min(p.overbooked(es.k_e)) };
        }
        for j in 0..n_es {
            let held = auction.held_bids_of(j);
            let keep = rule.choose(j, &held);
            let drop: Vec<usize> = held.iter().map(|b| b.buyer).filter(|b| !keep.contains(b)).collect();
            if !drop.is_empty() {
                changed = true;
                auction.force_reject(j, &drop);
            }
        }
        auction.recheck_all(&rule);
        let r = auction.run(&rule, round_guard(scenario.mus.len(), ph1.bound))?;
        rounds_phase3 += r;
        changed |= r > 0;
        if changed {
            refresh_slots(scenario, &auction, &mut slots);
        }
        if risk.on() {
            let mut withdrew = false;
            for j in 0..n_es {
                let lambda = mu_e_lambda(scenario, &auction, &pairs, j, rule.supply[j]);
                for (mu, l) in lambda {
                    let (_, opt, price) = auction.held_at[mu].expect("held");
                    let t = pairs[mu][opt];
                    let terms = ContractTermsUE { mu, es: j, price, q_ue: p.q_ue, q_eu: p.q_eu };
                    let a = mu_expected_utility_and_risks(scenario.mus[mu].a, &terms, t.e_v, l.min(1.0), p)?;
                    if !a.feasible {
                        auction.remove_buyer(mu);
                        withdrawn_mus.push(mu);
                        withdrew = true;
                    }
                }
            }
            for j in 0..n_es {
                if withdrawn_ess.contains(&j) {
                    continue;
                }
                let assessment = es_assessment(scenario, &auction, &pairs, &slots, j, rule.supply[j]);
                if !assessment.feasible {
                    auction.remove_seller(j);
                    for s in slots.iter_mut().filter(|s| s.es == j && s.status == SlotStatus::Booked) {
                        s.status = SlotStatus::Cancelled;
                    }
                    withdrawn_ess.push(j);
                    withdrew = true;
                }
            }
            for k in 0..scenario.css.len() {
                if withdrawn_css.contains(&k) {
                    continue;
                }
                let (demands, cs_slots) = cs_view(scenario, &auction, &slots, k);
                if cs_slots.is_empty() {
                    continue;
                }
                let a = cs_expected_utility_and_risk(&scenario.css[k], &demands, &cs_slots, p);
                if !a.feasible {
                    for s in slots.iter_mut().filter(|s| s.cs == Some(k) && s.status == SlotStatus::Booked) {
                        s.status = SlotStatus::Cancelled;
                    }
                    withdrawn_css.push(k);
                    withdrew = true;
                }
            }
            changed |= withdrew;
        }
        if !changed {
            return Ok(assemble(scenario, risk, &auction, &pairs, slots, &rule, Assembly {
                withdrawn_mus,
                withdrawn_ess,
                withdrawn_css,
                rounds_phase1: ph1.rounds,
                rounds_phase2: ph2.rounds,
                rounds_phase3,
                phase1_bound: ph1.bound,
                phase2_bound: ph2.bound,
            }));
        }
    }
    Err(MarketError::Invariant("phase-3 reconciliation did not settle".into()))
}

fn es_assessment(
    scenario: &Scenario,
    auction: &Auction,
    pairs: &[Vec<PairTerms>],
    slots: &[SlotRecord],
    j: usize,
    supply: usize,
) -> crate::expectation::EsAssessment {
    let p = &scenario.params;
    let lambda: BTreeMap<usize, f64> = mu_e_lambda(scenario, auction, pairs, j, supply).into_iter().collect();
    let held = auction.held_bids_of(j);
    let contracts: Vec<EsContractTerms> = held
        .iter()
        .map(|b| EsContractTerms {
            a: scenario.mus[b.buyer].a,
            price: b.price,
            cost: pairs[b.buyer][b.opt].cost,
            e_lambda: lambda[&b.buyer],
        })
        .collect();
    // Slot tasks are not bound to MUs yet; price them at the costliest contract.
    let slot_cost = contracts.iter().map(|c| c.cost).fold(0.0, f64::max);
    let es_slots: Vec<EsSlotTerms> = slots
        .iter()
        .filter(|s| s.es == j && s.status == SlotStatus::Booked)
        .map(|s| EsSlotTerms { price: s.price, cost: slot_cost, e_beta: s.e_beta })
        .collect();
    es_expected_utility_and_risks(scenario.ess[j].g_e, &contracts, &es_slots, p)
}

struct Assembly {
    withdrawn_mus: Vec<usize>,
    withdrawn_ess: Vec<usize>,
    withdrawn_css: Vec<usize>,
    rounds_phase1: u32,
    rounds_phase2: u32,
    rounds_phase3: u32,
    phase1_bound: u32,
    phase2_bound: u32,
}

fn assemble(
    scenario: &Scenario,
    risk: RiskMode,
    auction: &Auction,
    pairs: &[Vec<PairTerms>],
    slots: Vec<SlotRecord>,
    rule: &EsRule<'_>,
    asm: Assembly,
) -> FuturesOutcome {
    let p = &scenario.params;
    let n_mu = scenario.mus.len();
    let n_es = scenario.ess.len();
    let mut out = FuturesOutcome::empty(scenario);
    out.risk_mode = risk;
    for j in 0..n_es {
        for b in auction.held_bids_of(j) {
            out.mu_es[b.buyer] = Some(j);
            out.omega[j].push(b.buyer);
            out.ue_contracts.push(ContractTermsUE { mu: b.buyer, es: j, price: b.price, q_ue: p.q_ue, q_eu: p.q_eu });
        }
        out.omega[j].sort_unstable();
        for (mu, l) in mu_e_lambda(scenario, auction, pairs, j, rule.supply[j]) {
            out.e_lambda[mu] = l;
        }
    }
    out.ue_contracts.sort_by_key(|c| c.mu);
    for s in slots.iter().filter(|s| s.status == SlotStatus::Booked) {
        let k = s.cs.expect("booked");
        out.ec_contracts.push(ContractTermsEC { task: s.index, es: s.es, cs: k, price: s.price, q_ec: p.q_ec });
        *out.offload_sets.entry((s.es, k)).or_insert(0) += 1;
        if !out.phi[s.es].contains(&k) {
            out.phi[s.es].push(k);
        }
    }
    for v in out.phi.iter_mut() {
        v.sort_unstable();
    }
    out.mu_level = auction.level.clone();
    for i in 0..n_mu {
        for (o, t) in pairs[i].iter().enumerate() {
            if auction.blocked[i][o] {
                out.blocked_pairs.push((i, t.es));
            }
        }
    }
    out.withdrawn_mus = asm.withdrawn_mus;
    out.withdrawn_ess = asm.withdrawn_ess;
    out.withdrawn_css = asm.withdrawn_css;
    out.rounds_phase1 = asm.rounds_phase1;
    out.rounds_phase2 = asm.rounds_phase2;
    out.rounds_phase3 = asm.rounds_phase3;
    out.phase1_bound = asm.phase1_bound;
    out.phase2_bound = asm.phase2_bound;
    out.interactions = auction.traffic.total();
    out.mu_exchanges = auction.exchanges.clone();

    // Risk table over every contractual party.
    let mut table = Vec::new();
    for c in &out.ue_contracts {
        let mu = &scenario.mus[c.mu];
        let e_v = expected_valuation(mu, &scenario.ess[c.es], p);
        if let Ok(a) = mu_expected_utility_and_risks(mu.a, c, e_v, out.e_lambda[c.mu].min(1.0), p) {
            table.push(entry("mu", c.mu, "r1_u", a.risk.r1_u.unwrap_or(0.0), p.rho[0]));
            table.push(entry("mu", c.mu, "r2_u", out.e_lambda[c.mu], p.rho[1]));
        }
    }
    for j in 0..n_es {
        if out.omega[j].is_empty() {
            continue;
        }
        let a = es_assessment(scenario, auction, pairs, &slots, j, rule.supply[j]);
        table.push(entry("es", j, "r1_e", a.risk.r1_e.unwrap_or(0.0), p.rho[2]));
        table.push(entry("es", j, "r2_e", a.risk.r2_e.unwrap_or(0.0), p.rho[3]));
    }
    for k in 0..scenario.css.len() {
        let (demands, cs_slots) = cs_view(scenario, auction, &slots, k);
        if cs_slots.is_empty() {
            continue;
        }
        let a = cs_expected_utility_and_risk(&scenario.css[k], &demands, &cs_slots, p);
        table.push(entry("cs", k, "r_c", a.r_c, p.rho[4]));
    }
    out.risk_table = table;
    out.slots = slots;
    out
}

fn entry(party: &str, id: usize, risk: &str, value: f64, threshold: f64) -> RiskEntry {
    RiskEntry { party: party.into(), id, risk: risk.into(), value, threshold }
}

/// R2^E of a contract set: Pr(attendance > supply).
pub fn es_overload_risk(scenario: &Scenario, omega: &[usize], supply: usize) -> f64 {
    let probs: Vec<f64> = omega.iter().map(|&m| scenario.mus[m].a).collect();
    participation_tail_prob(&probs, supply)
}
