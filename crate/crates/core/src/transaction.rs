//! One practical transaction: realize (α, γ, ε), settle forward contracts,
//! run the spot market for everyone left over, and book realized utilities.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::expectation::{cs_cost, es_cost, es_margin, uplink_rate, valuation, SlotKey};
use crate::futures::FuturesOutcome;
use crate::mechanism::Mechanism;
use crate::metrics::MetricsReport;
use crate::model::Scenario;
use crate::spot::{run_os_clm, select_volunteers, settle_cloud_contracts, SpotEs, SpotMarket, SpotMu, SpotOption, SpotOutcome};

pub const E2E_MS: (f64, f64) = (1.0, 15.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransactionSample {
    pub alpha: Vec<bool>,
    /// γ per MU, aligned with its candidate list.
    pub gamma: Vec<Vec<f64>>,
    /// Inherent demand per CS, capped at G_c.
    pub epsilon: Vec<usize>,
    pub e2e_ms: Vec<f64>,
}

impl TransactionSample {
    pub fn gamma_at(&self, scenario: &Scenario, mu: usize, es: usize) -> f64 {
        let slot = scenario.mus[mu].candidate_slot(es).expect("es is a candidate");
        self.gamma[mu][slot]
    }
}

pub fn sample_transaction<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> TransactionSample {
    let alpha = scenario.mus.iter().map(|m| rng.random_bool(m.a.clamp(0.0, 1.0))).collect();
    let gamma = scenario
        .mus
        .iter()
        .map(|m| {
            m.candidates
                .iter()
                .map(|_| if m.gamma_low < m.gamma_high { rng.random_range(m.gamma_low..m.gamma_high) } else { m.gamma_low })
                .collect()
        })
        .collect();
    let epsilon = scenario
        .css
        .iter()
        .map(|c| {
            if c.sigma > 0.0 {
                let draw: f64 = Poisson::new(c.sigma).expect("positive mean").sample(rng);
                (draw as usize).min(c.g_c)
            } else {
                0
            }
        })
        .collect();
    let e2e_ms = scenario.mus.iter().map(|_| rng.random_range(E2E_MS.0..=E2E_MS.1)).collect();
    TransactionSample { alpha, gamma, epsilon, e2e_ms }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Service {
    Absent,
    /// Runs on the device.
    Device,
    Edge { es: usize },
    Cloud { es: usize, cs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSettlement {
    pub es: usize,
    pub index: usize,
    pub cs: usize,
    pub fulfilled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransactionOutcome {
    pub mu_utility: Vec<f64>,
    pub es_utility: Vec<f64>,
    pub cs_utility: Vec<f64>,
    /// Σ of the three parties' utilities.
    pub social_welfare: f64,
    /// Σ served (v - serving cost) + inherent income - inherent compensation.
    pub social_welfare_direct: f64,
    pub service: Vec<Service>,
    /// Completion time per attending MU in ms (None if absent).
    pub ptct_ms: Vec<Option<f64>>,
    pub volunteers: Vec<(usize, usize)>,
    pub beta: Vec<SlotSettlement>,
    /// Inherent requests turned away per CS.
    pub overflow: Vec<usize>,
    pub spot: Option<SpotOutcome>,
    /// Residual market the spot outcome cleared.
    pub spot_market: Option<SpotMarket>,
    /// MU↔ES interactions in this transaction.
    pub ni: u64,
    pub rt_ms: f64,
    pub capacity_violations: Vec<String>,
}

impl TransactionOutcome {
    pub fn ptct_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.ptct_ms.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn identity_gap(&self) -> f64 {
        (self.social_welfare - self.social_welfare_direct).abs() / self.social_welfare.abs().max(1.0)
    }
}

/// Realized-utility bookkeeping shared by every mechanism.
pub(crate) struct Books<'a> {
    scenario: &'a Scenario,
    sample: &'a TransactionSample,
    pub mu: Vec<f64>,
    pub es: Vec<f64>,
    pub cs: Vec<f64>,
    pub direct: f64,
    pub service: Vec<Service>,
    /// Proposal exchanges that feed decision latency.
    pub exchanges: Vec<u32>,
    pub volunteers: Vec<(usize, usize)>,
    pub beta: Vec<SlotSettlement>,
    pub overflow: Vec<usize>,
    /// VMs occupied per CS by tasks (excluding inherent demand).
    pub cs_tasks: Vec<usize>,
}

impl<'a> Books<'a> {
    pub fn new(scenario: &'a Scenario, sample: &'a TransactionSample) -> Self {
        let n = scenario.mus.len();
        Books {
            scenario,
            sample,
            mu: vec![0.0; n],
            es: vec![0.0; scenario.ess.len()],
            cs: vec![0.0; scenario.css.len()],
            direct: 0.0,
            service: (0..n)
                .map(|i| if sample.alpha[i] { Service::Device } else { Service::Absent })
                .collect(),
            exchanges: vec![0; n],
            volunteers: Vec::new(),
            beta: Vec::new(),
            overflow: vec![0; scenario.css.len()],
            cs_tasks: vec![0; scenario.css.len()],
        }
    }

    pub fn value(&self, mu: usize, es: usize) -> f64 {
        let g = self.sample.gamma_at(self.scenario, mu, es);
        valuation(&self.scenario.mus[mu], &self.scenario.ess[es], g, &self.scenario.params)
            .map(|b| b.v)
            .unwrap_or(0.0)
    }

    pub fn edge(&mut self, mu: usize, es: usize, price: f64) {
        let v = self.value(mu, es);
        let c = es_cost(&self.scenario.mus[mu], &self.scenario.ess[es], &self.scenario.params);
        self.mu[mu] += v - price;
        self.es[es] += price - c;
        self.direct += v - c;
        self.service[mu] = Service::Edge { es };
    }

    pub fn cloud(&mut self, mu: usize, es: usize, cs: usize, price: f64, slot_price: f64) {
        let v = self.value(mu, es);
        let c = cs_cost(self.scenario.mus[mu].r_u, &self.scenario.css[cs], &self.scenario.params);
        self.mu[mu] += v - price;
        self.es[es] += price - slot_price;
        self.cs[cs] += slot_price - c;
        self.direct += v - c;
        self.cs_tasks[cs] += 1;
        self.service[mu] = Service::Cloud { es, cs };
    }

    /// Positive `amount` flows from the MU to the ES.
    pub fn mu_pays_es(&mut self, mu: usize, es: usize, amount: f64) {
        self.mu[mu] -= amount;
        self.es[es] += amount;
    }

    pub fn es_pays_cs(&mut self, es: usize, cs: usize, amount: f64) {
        self.es[es] -= amount;
        self.cs[cs] += amount;
    }

    /// Inherent requestors: the CS serves ε - N of them and compensates N.
    pub fn inherent(&mut self) {
        for (k, c) in self.scenario.css.iter().enumerate() {
            let eps = self.sample.epsilon[k];
            let n = self.overflow[k].min(eps);
            let v = c.p_inherent * (eps - n) as f64 - c.q_inherent * n as f64;
            self.cs[k] += v;
            self.direct += v;
        }
    }

    fn ptct(&self, mu: usize) -> Option<f64> {
        let m = &self.scenario.mus[mu];
        let p = &self.scenario.params;
        let latency = self.exchanges[mu] as f64 * 2.0 * self.sample.e2e_ms[mu];
        let exec_s = match self.service[mu] {
            Service::Absent => return None,
            Service::Device => m.local_time(),
            Service::Edge { es } => {
                let rate = uplink_rate(m, self.sample.gamma_at(self.scenario, mu, es), p);
                m.d_u / rate + m.r_u / self.scenario.ess[es].f_e
            }
            Service::Cloud { es, cs } => {
                let rate = uplink_rate(m, self.sample.gamma_at(self.scenario, mu, es), p);
                m.d_u / rate + m.r_u / self.scenario.css[cs].f_c
            }
        };
        Some(latency + 1000.0 * exec_s)
    }

    /// Physical capacity audit over the final service map.
    fn audit(&self, spot: Option<&SpotOutcome>) -> Vec<String> {
        let mut issues = Vec::new();
        let n_es = self.scenario.ess.len();
        let mut edge = vec![0usize; n_es];
        let mut total = vec![0usize; n_es];
        for s in &self.service {
            match *s {
                Service::Edge { es } => {
                    edge[es] += 1;
                    total[es] += 1;
                }
                Service::Cloud { es, .. } => total[es] += 1,
                _ => {}
            }
        }
        for (j, e) in self.scenario.ess.iter().enumerate() {
            if edge[j] > e.g_e {
                issues.push(format!("ES {j} runs {} tasks on {} VMs", edge[j], e.g_e));
            }
            if total[j] > e.k_e {
                issues.push(format!("ES {j} serves {} MUs on {} subcarriers", total[j], e.k_e));
            }
        }
        for (k, c) in self.scenario.css.iter().enumerate() {
            let inherent = self.sample.epsilon[k] - self.overflow[k].min(self.sample.epsilon[k]);
            if self.cs_tasks[k] + inherent > c.g_c {
                issues.push(format!("CS {k} runs {} tasks plus {inherent} inherent on {} VMs", self.cs_tasks[k], c.g_c));
            }
        }
        if let Some(s) = spot {
            for a in &s.assignments {
                if let Some((_, slot_price)) = a.cloud {
                    if slot_price > a.price + 1e-12 {
                        issues.push(format!("spot slot for MU {} costs more than the MU pays", a.mu));
                    }
                }
            }
        }
        issues
    }

    pub fn finish(self, spot: Option<(SpotMarket, SpotOutcome)>, ni: u64, rt_ms: f64) -> TransactionOutcome {
        let (spot_market, spot) = spot.map_or((None, None), |(m, o)| (Some(m), Some(o)));
        let ptct_ms = (0..self.scenario.mus.len()).map(|i| self.ptct(i)).collect();
        let capacity_violations = self.audit(spot.as_ref());
        let social_welfare = self.mu.iter().sum::<f64>() + self.es.iter().sum::<f64>() + self.cs.iter().sum::<f64>();
        TransactionOutcome {
            social_welfare,
            social_welfare_direct: self.direct,
            ptct_ms,
            capacity_violations,
            mu_utility: self.mu,
            es_utility: self.es,
            cs_utility: self.cs,
            service: self.service,
            volunteers: self.volunteers,
            beta: self.beta,
            overflow: self.overflow,
            spot,
            spot_market,
            ni,
            rt_ms,
        }
    }
}

/// Settles `futures` under `sample` and clears the residual market with OS-CLM.
/// An empty futures outcome gives the pure spot market.
pub fn execute_transaction<R: Rng + ?Sized>(
    scenario: &Scenario,
    futures: &FuturesOutcome,
    sample: &TransactionSample,
    rng: &mut R,
    timing: bool,
) -> Result<TransactionOutcome> {
    let p = &scenario.params;
    let n_es = scenario.ess.len();
    let mut books = Books::new(scenario, sample);
    let clock = Instant::now();

    // Contract settlement per ES.
    let mut fulfilled_at = vec![0usize; scenario.css.len()];
    let mut served_contract = vec![0usize; n_es];
    let mut local_used = vec![0usize; n_es];
    let mut is_volunteer = vec![None; scenario.mus.len()];
    for j in 0..n_es {
        let attending: Vec<usize> = futures.omega[j].iter().copied().filter(|&i| sample.alpha[i]).collect();
        for &i in futures.omega[j].iter().filter(|&&i| !sample.alpha[i]) {
            books.mu_pays_es(i, j, p.q_ue);
        }
        let booked = futures.booked_slots(j);
        let keys: Vec<SlotKey> = booked
            .iter()
            .map(|s| SlotKey { cs: s.cs.expect("booked"), index: s.index, price: s.price })
            .collect();
        let used = settle_cloud_contracts(attending.len(), scenario.ess[j].g_e, &keys, rng);
        let n_used = used.iter().filter(|u| **u).count();
        for (s, &u) in booked.iter().zip(&used) {
            let k = s.cs.expect("booked");
            books.beta.push(SlotSettlement { es: j, index: s.index, cs: k, fulfilled: u });
            if u {
                fulfilled_at[k] += 1;
            } else {
                books.es_pays_cs(j, k, p.q_ec);
            }
        }
        let supply = scenario.ess[j].g_e + n_used;
        let contract = |i: usize| futures.contract_of(i).expect("contractual MU");
        let margin = |i: usize| {
            let c = contract(i);
            es_margin(scenario.mus[i].a, c.price, es_cost(&scenario.mus[i], &scenario.ess[j], p), p)
        };
        let ranked: Vec<(usize, f64)> = attending.iter().map(|&i| (i, margin(i))).collect();
        let volunteers = select_volunteers(&ranked, supply);
        for &i in &volunteers {
            books.mu_pays_es(i, j, -p.q_eu);
            books.volunteers.push((i, j));
            is_volunteer[i] = Some(j);
        }
        let mut served: Vec<usize> = attending.iter().copied().filter(|i| !volunteers.contains(i)).collect();
        // The costliest tasks stay local; cloud slots carry the rest.
        served.sort_by(|&x, &y| {
            let cx = es_cost(&scenario.mus[x], &scenario.ess[j], p);
            let cy = es_cost(&scenario.mus[y], &scenario.ess[j], p);
            cy.total_cmp(&cx).then(x.cmp(&y))
        });
        let n_local = served.len().min(scenario.ess[j].g_e);
        let fulfilled: Vec<(usize, f64)> = booked
            .iter()
            .zip(&used)
            .filter(|(_, u)| **u)
            .map(|(s, _)| (s.cs.expect("booked"), s.price))
            .collect();
        for (pos, &i) in served.iter().enumerate() {
            let price = contract(i).price;
            if pos < n_local {
                books.edge(i, j, price);
            } else {
                let (k, slot_price) = fulfilled[pos - n_local];
                books.cloud(i, j, k, price, slot_price);
            }
        }
        served_contract[j] = served.len();
        local_used[j] = n_local;
    }
    for (k, c) in scenario.css.iter().enumerate() {
        books.overflow[k] = (fulfilled_at[k] + sample.epsilon[k]).saturating_sub(c.g_c);
    }

    // Residual market B′: attending MUs without a contract, plus volunteers.
    let mut market = SpotMarket {
        ess: scenario
            .ess
            .iter()
            .enumerate()
            .map(|(j, e)| SpotEs { free_local: e.g_e - local_used[j], room: e.k_e.saturating_sub(served_contract[j]) })
            .collect(),
        cs_free: scenario
            .css
            .iter()
            .enumerate()
            .map(|(k, c)| c.g_c.saturating_sub(fulfilled_at[k] + sample.epsilon[k]))
            .collect(),
        mus: Vec::new(),
    };
    for (i, m) in scenario.mus.iter().enumerate() {
        if !sample.alpha[i] || (futures.mu_es[i].is_some() && is_volunteer[i].is_none()) {
            continue;
        }
        let options = m
            .candidates
            .iter()
            .filter(|&&j| is_volunteer[i] != Some(j))
            .map(|&j| SpotOption { es: j, value: books.value(i, j), cost: es_cost(m, &scenario.ess[j], p) })
            .collect();
        market.mus.push(SpotMu { mu: i, options });
    }
    let spot = run_os_clm(scenario, &market)?;
    let rt_ms = if timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    for (b, m) in market.mus.iter().enumerate() {
        books.exchanges[m.mu] = spot.mu_exchanges[b];
    }
    for a in &spot.assignments {
        match a.cloud {
            None => books.edge(a.mu, a.es, a.price),
            Some((k, slot_price)) => books.cloud(a.mu, a.es, k, a.price, slot_price),
        }
    }
    books.inherent();
    let ni = spot.interactions;
    let out = books.finish(Some((market, spot)), ni, rt_ms);
    if !out.capacity_violations.is_empty() {
        return Err(MarketError::Invariant(out.capacity_violations.join("; ")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonteCarloOptions {
    /// Measure decision time; off gives RT = 0 and byte-stable reports.
    pub timing: bool,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions { timing: true, threads: None }
    }
}

/// Stream `run` of the generator seeded with `seed`.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

/// Per-run summary kept for the reduction.
struct RunStats {
    sw: f64,
    ni: u64,
    rt_ms: f64,
    ptct: Option<f64>,
    parties: [f64; 3],
    gap: f64,
}

/// Futures once, then `runs` independent transactions. Results are reduced
/// in run order, so the report does not depend on the thread count.
pub fn run_monte_carlo(
    scenario: &Scenario,
    mechanism: &dyn Mechanism,
    runs: usize,
    seed: u64,
    opts: MonteCarloOptions,
) -> Result<MetricsReport> {
    let (futures, report) = run_monte_carlo_with_futures(scenario, mechanism, runs, seed, opts)?;
    drop(futures);
    Ok(report)
}

pub fn run_monte_carlo_with_futures(
    scenario: &Scenario,
    mechanism: &dyn Mechanism,
    runs: usize,
    seed: u64,
    opts: MonteCarloOptions,
) -> Result<(FuturesOutcome, MetricsReport)> {
    if runs == 0 {
        return Err(MarketError::Config("runs must be at least 1".into()));
    }
    let clock = Instant::now();
    let futures = mechanism.prepare(scenario)?;
    let prepare_ms = if opts.timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let one = |run: usize| -> Result<RunStats> {
        let mut rng = run_rng(seed, run as u64);
        let sample = sample_transaction(scenario, &mut rng);
        let out = mechanism.transact(scenario, &futures, &sample, &mut rng, opts.timing)?;
        let gap = out.identity_gap();
        if gap > 1e-9 {
            return Err(MarketError::Invariant(format!("social welfare identity off by {gap:e} in run {run}")));
        }
        Ok(RunStats {
            sw: out.social_welfare,
            ni: out.ni,
            rt_ms: out.rt_ms,
            ptct: out.ptct_mean(),
            parties: [out.mu_utility.iter().sum(), out.es_utility.iter().sum(), out.cs_utility.iter().sum()],
            gap,
        })
    };
    let stats: Vec<RunStats> = match opts.threads {
        Some(1) => (0..runs).map(one).collect::<Result<_>>()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MarketError::Config(e.to_string()))?
            .install(|| (0..runs).into_par_iter().map(one).collect::<Result<_>>())?,
        None => (0..runs).into_par_iter().map(one).collect::<Result<_>>()?,
    };
    let n = runs as f64;
    let mean = |f: &dyn Fn(&RunStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let sw_mean = mean(&|s| s.sw);
    let sw_stderr = if runs > 1 {
        let var = stats.iter().map(|s| (s.sw - sw_mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let ptct: Vec<f64> = stats.iter().filter_map(|s| s.ptct).collect();
    let report = MetricsReport {
        mechanism: mechanism.name().to_string(),
        runs,
        seed,
        sw_mean,
        sw_stderr,
        ni_mean: mean(&|s| s.ni as f64) + futures.interactions as f64 / n,
        rt_ms: mean(&|s| s.rt_ms) + prepare_ms / n,
        ptct_mean_ms: if ptct.is_empty() { 0.0 } else { ptct.iter().sum::<f64>() / ptct.len() as f64 },
        mu_util: mean(&|s| s.parties[0]),
        es_util: mean(&|s| s.parties[1]),
        cs_util: mean(&|s| s.parties[2]),
        sw_identity_gap: stats.iter().map(|s| s.gap).fold(0.0, f64::max),
        contracts: futures.ue_contracts.len(),
        risk_table: futures.risk_table.clone(),
    };
    Ok((futures, report))
}
