//! Mechanism strategies behind one trait object, selected by name.
//!
//! The hybrid variants sign forward contracts once per scenario and run the
//! spot market per transaction; the rest trade only at transaction time.
//! Greedy baseline prices are local stand-ins: cost floor for the MU-first
//! rule, valuation ceiling for the ES-first rule, midpoint for random.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{MarketError, Result};
use crate::expectation::{cs_cost, es_cost};
use crate::futures::{run_oa_clm_with, FuturesOutcome, RiskMode};
use crate::model::Scenario;
use crate::transaction::{execute_transaction, Books, TransactionOutcome, TransactionSample};

pub trait Mechanism: Send + Sync {
    fn name(&self) -> &'static str;

    /// Ahead-of-time stage; contracts persist across transactions.
    fn prepare(&self, scenario: &Scenario) -> Result<FuturesOutcome>;

    fn transact(
        &self,
        scenario: &Scenario,
        futures: &FuturesOutcome,
        sample: &TransactionSample,
        rng: &mut dyn rand::RngCore,
        timing: bool,
    ) -> Result<TransactionOutcome>;
}

pub struct Hybrid {
    pub risk: RiskMode,
}

impl Mechanism for Hybrid {
    fn name(&self) -> &'static str {
        match self.risk {
            RiskMode::Enforced => "hybrid",
            RiskMode::Ignored => "hybrid_no_risk",
        }
    }

    fn prepare(&self, scenario: &Scenario) -> Result<FuturesOutcome> {
        run_oa_clm_with(scenario, self.risk)
    }

    fn transact(
        &self,
        scenario: &Scenario,
        futures: &FuturesOutcome,
        sample: &TransactionSample,
        rng: &mut dyn rand::RngCore,
        timing: bool,
    ) -> Result<TransactionOutcome> {
        execute_transaction(scenario, futures, sample, rng, timing)
    }
}

pub struct ConventionalSpot;

impl Mechanism for ConventionalSpot {
    fn name(&self) -> &'static str {
        "conventional_spot"
    }

    fn prepare(&self, scenario: &Scenario) -> Result<FuturesOutcome> {
        scenario.validate()?;
        Ok(FuturesOutcome::empty(scenario))
    }

    fn transact(
        &self,
        scenario: &Scenario,
        futures: &FuturesOutcome,
        sample: &TransactionSample,
        rng: &mut dyn rand::RngCore,
        timing: bool,
    ) -> Result<TransactionOutcome> {
        execute_transaction(scenario, futures, sample, rng, timing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreedyKind {
    MuPrioritized,
    EsPrioritized,
    Random,
}

pub struct Greedy {
    pub kind: GreedyKind,
}

impl Mechanism for Greedy {
    fn name(&self) -> &'static str {
        match self.kind {
            GreedyKind::MuPrioritized => "mu_prioritized",
            GreedyKind::EsPrioritized => "es_prioritized",
            GreedyKind::Random => "random_m",
        }
    }

    fn prepare(&self, scenario: &Scenario) -> Result<FuturesOutcome> {
        scenario.validate()?;
        Ok(FuturesOutcome::empty(scenario))
    }

    fn transact(
        &self,
        scenario: &Scenario,
        _futures: &FuturesOutcome,
        sample: &TransactionSample,
        rng: &mut dyn rand::RngCore,
        timing: bool,
    ) -> Result<TransactionOutcome> {
        greedy_transaction(self.kind, scenario, sample, rng, timing)
    }
}

/// Per-ES and per-CS capacity left during a greedy pass.
struct Capacity {
    local: Vec<usize>,
    room: Vec<usize>,
    cs_free: Vec<usize>,
}

impl Capacity {
    fn new(scenario: &Scenario, sample: &TransactionSample) -> Self {
        Capacity {
            local: scenario.ess.iter().map(|e| e.g_e).collect(),
            room: scenario.ess.iter().map(|e| e.k_e).collect(),
            cs_free: scenario.css.iter().zip(&sample.epsilon).map(|(c, &e)| c.g_c.saturating_sub(e)).collect(),
        }
    }

    /// How `es` would serve `mu` right now: locally, via the cheapest free CS, or not at all.
    fn route(&self, scenario: &Scenario, mu: usize, es: usize) -> Option<Route> {
        if self.room[es] == 0 {
            return None;
        }
        if self.local[es] > 0 {
            return Some(Route::Local(es_cost(&scenario.mus[mu], &scenario.ess[es], &scenario.params)));
        }
        let r = scenario.mus[mu].r_u;
        (0..scenario.css.len())
            .filter(|&k| self.cs_free[k] > 0)
            .map(|k| (k, cs_cost(r, &scenario.css[k], &scenario.params)))
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
            .map(|(k, c)| Route::Cloud(k, c))
    }

    fn take(&mut self, es: usize, route: Route) {
        self.room[es] -= 1;
        match route {
            Route::Local(_) => self.local[es] -= 1,
            Route::Cloud(k, _) => self.cs_free[k] -= 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Route {
    Local(f64),
    /// (cs, CS cost floor).
    Cloud(usize, f64),
}

impl Route {
    fn cost(self) -> f64 {
        match self {
            Route::Local(c) | Route::Cloud(_, c) => c,
        }
    }
}

fn book(books: &mut Books<'_>, cap: &mut Capacity, mu: usize, es: usize, route: Route, price: f64) {
    match route {
        Route::Local(_) => books.edge(mu, es, price),
        Route::Cloud(k, c) => books.cloud(mu, es, k, price, c),
    }
    cap.take(es, route);
}

pub(crate) fn greedy_transaction(
    kind: GreedyKind,
    scenario: &Scenario,
    sample: &TransactionSample,
    rng: &mut dyn rand::RngCore,
    timing: bool,
) -> Result<TransactionOutcome> {
    let mut books = Books::new(scenario, sample);
    let mut cap = Capacity::new(scenario, sample);
    let clock = Instant::now();
    let attending: Vec<usize> = (0..scenario.mus.len())
        .filter(|&i| sample.alpha[i] && !scenario.mus[i].candidates.is_empty())
        .collect();
    match kind {
        GreedyKind::MuPrioritized => {
            for &i in &attending {
                let best = scenario.mus[i]
                    .candidates
                    .iter()
                    .filter_map(|&j| cap.route(scenario, i, j).map(|r| (j, r, books.value(i, j) - r.cost())))
                    .filter(|x| x.2 > 0.0)
                    .min_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
                if let Some((j, r, _)) = best {
                    book(&mut books, &mut cap, i, j, r, r.cost());
                }
            }
        }
        GreedyKind::EsPrioritized => {
            let mut taken = vec![false; scenario.mus.len()];
            for j in 0..scenario.ess.len() {
                loop {
                    let best = attending
                        .iter()
                        .filter(|&&i| !taken[i] && scenario.mus[i].candidate_slot(j).is_some())
                        .filter_map(|&i| cap.route(scenario, i, j).map(|r| (i, r, books.value(i, j) - r.cost())))
                        .filter(|x| x.2 > 0.0)
                        .min_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
                    let Some((i, r, _)) = best else { break };
                    let v = books.value(i, j);
                    book(&mut books, &mut cap, i, j, r, v);
                    taken[i] = true;
                }
            }
        }
        GreedyKind::Random => {
            let mut order = attending.clone();
            order.shuffle(rng);
            for i in order {
                let open: Vec<(usize, Route)> = scenario.mus[i]
                    .candidates
                    .iter()
                    .filter_map(|&j| cap.route(scenario, i, j).map(|r| (j, r)))
                    .filter(|&(j, r)| books.value(i, j) > r.cost())
                    .collect();
                if open.is_empty() {
                    continue;
                }
                let (j, r) = open[rng.random_range(0..open.len())];
                let r = match r {
                    Route::Cloud(..) => {
                        // Any CS with a free VM, uniformly.
                        let free: Vec<usize> = (0..scenario.css.len()).filter(|&k| cap.cs_free[k] > 0).collect();
                        let k = free[rng.random_range(0..free.len())];
                        let c = cs_cost(scenario.mus[i].r_u, &scenario.css[k], &scenario.params);
                        if books.value(i, j) <= c {
                            continue;
                        }
                        Route::Cloud(k, c)
                    }
                    local => local,
                };
                let price = 0.5 * (r.cost() + books.value(i, j));
                book(&mut books, &mut cap, i, j, r, price);
            }
        }
    }
    let rt_ms = if timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    // One request/reply exchange per attending MU.
    for &i in &attending {
        books.exchanges[i] = 1;
    }
    let ni = 2 * attending.len() as u64;
    books.inherent();
    let out = books.finish(None, ni, rt_ms);
    if !out.capacity_violations.is_empty() {
        return Err(MarketError::Invariant(out.capacity_violations.join("; ")));
    }
    Ok(out)
}

/// Name → mechanism lookup.
pub struct MechanismRegistry {
    entries: BTreeMap<&'static str, Box<dyn Mechanism>>,
    order: Vec<&'static str>,
}

impl MechanismRegistry {
    pub fn empty() -> Self {
        MechanismRegistry { entries: BTreeMap::new(), order: Vec::new() }
    }

    pub fn register(&mut self, m: Box<dyn Mechanism>) {
        let name = m.name();
        if self.entries.insert(name, m).is_none() {
            self.order.push(name);
        }
    }

    /// The six built-in mechanisms, hybrid first.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Hybrid { risk: RiskMode::Enforced }));
        r.register(Box::new(ConventionalSpot));
        r.register(Box::new(Hybrid { risk: RiskMode::Ignored }));
        r.register(Box::new(Greedy { kind: GreedyKind::MuPrioritized }));
        r.register(Box::new(Greedy { kind: GreedyKind::EsPrioritized }));
        r.register(Box::new(Greedy { kind: GreedyKind::Random }));
        r
    }

    pub fn get(&self, name: &str) -> Result<&dyn Mechanism> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| MarketError::UnknownMechanism(name.to_string()))
    }

    /// Registration order.
    pub fn names(&self) -> &[&'static str] {
        &self.order
    }
}
