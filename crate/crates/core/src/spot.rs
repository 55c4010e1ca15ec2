//! Spot market: matching on realized values within one transaction, plus the
//! two runtime backup plans for futures contracts (volunteers and cloud-slot
//! settlement).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{Auction, Bid, ChoiceRule, Opt};
use crate::error::{MarketError, Result};
use crate::expectation::{cs_cost, slot_ranking, SlotKey};
use crate::model::Scenario;

const EPS: f64 = 1e-12;

/// Attendees beyond `realized_supply`, lowest utility first, ties to the lower id.
pub fn select_volunteers(attending: &[(usize, f64)], realized_supply: usize) -> Vec<usize> {
    if attending.len() <= realized_supply {
        return Vec::new();
    }
    let mut v = attending.to_vec();
    v.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let mut out: Vec<usize> = v[..attending.len() - realized_supply].iter().map(|x| x.0).collect();
    out.sort_unstable();
    out
}

/// Which booked slots are used (input order): the `clamp(attendance - g_e)`
/// best-ranked ones. Slots that tie on (price, cs) are ordered by a draw
/// from `rng`, which does not change the distribution of outcomes.
pub fn settle_cloud_contracts<R: Rng + ?Sized>(attendance: usize, g_e: usize, slots: &[SlotKey], rng: &mut R) -> Vec<bool> {
    let mut order = slot_ranking(slots);
    let mut start = 0;
    while start < order.len() {
        let s0 = slots[order[start]];
        let mut end = start + 1;
        while end < order.len() && slots[order[end]].price == s0.price && slots[order[end]].cs == s0.cs {
            end += 1;
        }
        if end - start > 1 {
            order[start..end].shuffle(rng);
        }
        start = end;
    }
    let used = attendance.saturating_sub(g_e).min(slots.len());
    let mut out = vec![false; slots.len()];
    for &s in &order[..used] {
        out[s] = true;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotOption {
    pub es: usize,
    /// Realized valuation v_{i,j}.
    pub value: f64,
    /// c^E for this task at this ES.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotMu {
    pub mu: usize,
    /// Ascending by ES id.
    pub options: Vec<SpotOption>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotEs {
    /// Local VMs not used by futures contracts.
    pub free_local: usize,
    /// Subcarriers left for spot MUs.
    pub room: usize,
}

/// Residual market handed to OS-CLM.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpotMarket {
    pub mus: Vec<SpotMu>,
    pub ess: Vec<SpotEs>,
    /// Free VMs per CS after fulfilled slots and inherent demand.
    pub cs_free: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpotSlotStatus {
    Booked,
    Unbooked,
    Released,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotSlot {
    pub es: usize,
    pub index: usize,
    /// MU whose price capped this slot's bids.
    pub task_mu: usize,
    pub cap: f64,
    pub r_u: f64,
    pub cs: Option<usize>,
    pub price: f64,
    pub status: SpotSlotStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotAssignment {
    pub mu: usize,
    pub es: usize,
    pub price: f64,
    /// (cs, slot price) when the ES forwards the task to the cloud.
    pub cloud: Option<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpotOutcome {
    pub assignments: Vec<SpotAssignment>,
    /// ω′(s_j): spot MUs per ES.
    pub omega_spot: Vec<Vec<usize>>,
    /// |B′_{j,k}| keyed by (es, cs).
    pub phi_spot: BTreeMap<(usize, usize), usize>,
    pub slots: Vec<SpotSlot>,
    /// Final price level per market MU (aligned with `SpotMarket::mus`).
    pub mu_level: Vec<f64>,
    /// Final spot supply per ES: free local VMs plus won slots.
    pub es_supply: Vec<usize>,
    pub rounds: u32,
    pub rounds_phase2: u32,
    pub interactions: u64,
    /// Proposal exchanges per market MU (aligned with `SpotMarket::mus`).
    pub mu_exchanges: Vec<u32>,
}

impl SpotOutcome {
    pub fn assignment_of(&self, mu: usize) -> Option<&SpotAssignment> {
        self.assignments.iter().find(|a| a.mu == mu)
    }
}

pub(crate) struct SpotEsRule<'a> {
    pub market: &'a SpotMarket,
    pub cap: Vec<usize>,
}

/// Keeps the `cap` highest-margin bids with p > c^E. Cardinality is the
/// only constraint, so greedy is exact.
pub fn spot_es_choose(bids: &[(usize, f64, f64)], cap: usize) -> Vec<usize> {
    let mut items: Vec<(usize, f64)> = bids
        .iter()
        .filter(|(_, price, cost)| price - cost > 0.0)
        .map(|&(b, price, cost)| (b, price - cost))
        .collect();
    items.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut keep: Vec<usize> = items.into_iter().take(cap).map(|x| x.0).collect();
    keep.sort_unstable();
    keep
}

impl ChoiceRule for SpotEsRule<'_> {
    fn choose(&self, seller: usize, bids: &[Bid]) -> Vec<usize> {
        let items: Vec<(usize, f64, f64)> = bids
            .iter()
            .map(|b| (b.buyer, b.price, self.market.mus[b.buyer].options[b.opt].cost))
            .collect();
        spot_es_choose(&items, self.cap[seller])
    }
}

struct SpotCsRule<'a> {
    slots: &'a [SpotSlot],
    cost: &'a [Vec<f64>],
    free: &'a [usize],
}

impl ChoiceRule for SpotCsRule<'_> {
    fn choose(&self, k: usize, bids: &[Bid]) -> Vec<usize> {
        let mut items: Vec<(usize, f64)> = bids
            .iter()
            .map(|b| (b.buyer, b.price - self.cost[b.buyer][k]))
            .filter(|x| x.1 > 0.0)
            .collect();
        items.sort_by(|x, y| {
            y.1.total_cmp(&x.1)
                .then(self.slots[x.0].es.cmp(&self.slots[y.0].es))
                .then(self.slots[x.0].index.cmp(&self.slots[y.0].index))
        });
        let mut keep: Vec<usize> = items.into_iter().take(self.free[k]).map(|x| x.0).collect();
        keep.sort_unstable();
        keep
    }
}

fn guard(n: usize, bound: u32) -> u32 {
    bound.saturating_mul(4).saturating_add(4 * n as u32).saturating_add(64)
}

/// OS-CLM over the residual market.
pub fn run_os_clm(scenario: &Scenario, market: &SpotMarket) -> Result<SpotOutcome> {
    let p = &scenario.params;
    let n_es = market.ess.len();
    let opts: Vec<Vec<Opt>> = market
        .mus
        .iter()
        .map(|m| {
            m.options
                .iter()
                .map(|o| Opt { seller: o.es, value: o.value, cap: o.value })
                .collect()
        })
        .collect();
    // Options below the opening price never propose; keep market options aligned with the auction's.
    let filtered = SpotMarket {
        mus: market
            .mus
            .iter()
            .map(|m| SpotMu { mu: m.mu, options: m.options.iter().copied().filter(|o| o.value >= p.p_min_ue).collect() })
            .collect(),
        ess: market.ess.clone(),
        cs_free: market.cs_free.clone(),
    };
    let top = filtered.mus.iter().flat_map(|m| m.options.iter().map(|o| o.value)).fold(p.p_min_ue, f64::max);
    let bound = (((top - p.p_min_ue) / p.dp_mu).max(0.0) - 1e-9).ceil() as u32 + 1;
    let mut auction = Auction::new(n_es, opts, p.p_min_ue, p.dp_mu);
    let mut rule = SpotEsRule { market: &filtered, cap: market.ess.iter().map(|e| e.room).collect() };
    let mut rounds = auction.run(&rule, guard(filtered.mus.len(), bound))?;

    // Phase 2: shortfall slots, one per excess MU, capped at that MU's price.
    let mut slots: Vec<SpotSlot> = Vec::new();
    for (j, es) in market.ess.iter().enumerate() {
        let mut held = auction.held_bids_of(j);
        if held.len() <= es.free_local {
            continue;
        }
        held.sort_by(|x, y| x.price.total_cmp(&y.price).then(x.buyer.cmp(&y.buyer)));
        for (index, b) in held[..held.len() - es.free_local].iter().enumerate() {
            let mu = filtered.mus[b.buyer].mu;
            slots.push(SpotSlot {
                es: j,
                index,
                task_mu: mu,
                cap: b.price,
                r_u: scenario.mus[mu].r_u,
                cs: None,
                price: p.p_min_ec,
                status: SpotSlotStatus::Unbooked,
            });
        }
    }
    let cost: Vec<Vec<f64>> = slots
        .iter()
        .map(|s| scenario.css.iter().map(|c| cs_cost(s.r_u, c, p)).collect())
        .collect();
    let slot_opts: Vec<Vec<Opt>> = slots
        .iter()
        .map(|s| {
            (0..scenario.css.len())
                .filter(|&k| market.cs_free[k] > 0)
                .map(|k| Opt { seller: k, value: 0.0, cap: s.cap })
                .collect()
        })
        .collect();
    let top2 = slots.iter().map(|s| s.cap).fold(p.p_min_ec, f64::max);
    let bound2 = (((top2 - p.p_min_ec) / p.dp_es).max(0.0) - 1e-9).ceil() as u32 + 1;
    let mut cs_auction = Auction::new(scenario.css.len(), slot_opts, p.p_min_ec, p.dp_es);
    let cs_rule = SpotCsRule { slots: &slots, cost: &cost, free: &market.cs_free };
    let rounds_phase2 = cs_auction.run(&cs_rule, guard(slots.len(), bound2))?;
    for (b, s) in slots.iter_mut().enumerate() {
        match cs_auction.held_at[b] {
            Some((k, _, price)) => {
                s.cs = Some(k);
                s.price = price;
                s.status = SpotSlotStatus::Booked;
            }
            None => s.price = cs_auction.level[b].min(s.cap),
        }
    }

    // Phase 3: trim to realized supply and pair cloud slots with MUs that can pay for them.
    let mut assignments = Vec::new();
    for _pass in 0..2 * slots.len() + 4 {
        let mut changed = false;
        for (j, es) in market.ess.iter().enumerate() {
            let won = slots.iter().filter(|s| s.es == j && s.status == SpotSlotStatus::Booked).count();
            rule.cap[j] = (es.free_local + won).min(es.room);
        }
        for j in 0..n_es {
            let held = auction.held_bids_of(j);
            let keep = rule.choose(j, &held);
            let drop: Vec<usize> = held.iter().map(|b| b.buyer).filter(|b| !keep.contains(b)).collect();
            if !drop.is_empty() {
                auction.force_reject(j, &drop);
                changed = true;
            }
        }
        auction.recheck_all(&rule);
        let r = auction.run(&rule, guard(filtered.mus.len(), bound))?;
        rounds += r;
        changed |= r > 0;

        assignments.clear();
        for (j, es) in market.ess.iter().enumerate() {
            let mut held = auction.held_bids_of(j);
            held.sort_by(|x, y| y.price.total_cmp(&x.price).then(x.buyer.cmp(&y.buyer)));
            let mut won: Vec<usize> = (0..slots.len())
                .filter(|&s| slots[s].es == j && slots[s].status == SpotSlotStatus::Booked)
                .collect();
            won.sort_by(|&x, &y| slots[y].price.total_cmp(&slots[x].price).then(x.cmp(&y)));
            let cloud = held.len().saturating_sub(es.free_local);
            // Unneeded slots go first, most expensive first.
            if won.len() > cloud {
                for &s in &won[..won.len() - cloud] {
                    slots[s].status = SpotSlotStatus::Released;
                }
                changed = true;
                continue;
            }
            if (0..cloud).any(|t| slots[won[t]].price > held[t].price + EPS) {
                slots[won[0]].status = SpotSlotStatus::Released;
                changed = true;
                continue;
            }
            for (t, b) in held.iter().enumerate() {
                let cloud_slot = (t < cloud).then(|| {
                    let s = &slots[won[t]];
                    (s.cs.expect("booked"), s.price)
                });
                assignments.push(SpotAssignment { mu: filtered.mus[b.buyer].mu, es: j, price: b.price, cloud: cloud_slot });
            }
        }
        if !changed {
            let mut out = SpotOutcome {
                omega_spot: vec![Vec::new(); n_es],
                mu_level: auction.level.clone(),
                es_supply: rule.cap.clone(),
                rounds,
                rounds_phase2,
                interactions: auction.traffic.total(),
                mu_exchanges: auction.exchanges.clone(),
                ..Default::default()
            };
            for a in &assignments {
                out.omega_spot[a.es].push(a.mu);
                if let Some((k, _)) = a.cloud {
                    *out.phi_spot.entry((a.es, k)).or_insert(0) += 1;
                }
            }
            for v in out.omega_spot.iter_mut() {
                v.sort_unstable();
            }
            assignments.sort_by_key(|a| a.mu);
            out.assignments = assignments;
            out.slots = slots;
            return Ok(out);
        }
    }
    Err(MarketError::Invariant("spot phase 3 did not settle".into()))
}
