//! Every auditor must flag an outcome with a planted defect.

mod common;

use common::*;
use hybrid_market::futures::SlotStatus;
use hybrid_market::spot::{SpotAssignment, SpotEs, SpotMarket, SpotMu, SpotOption, SpotOutcome};
use hybrid_market::verify::*;
use hybrid_market::{run_oa_clm, run_oa_clm_with, FuturesOutcome, RiskMode, Scenario};

fn lone() -> Scenario {
    scenario(vec![mu(0, 1.0, vec![0])], vec![es(0, 1, 1)], vec![cs(0, 2, 0.5)])
}

fn opts() -> AuditOptions {
    AuditOptions::default()
}

#[test]
fn clean_outcomes_pass() {
    let s = lone();
    assert!(audit_futures(&s, &run_oa_clm(&s).unwrap(), opts()).passed());
}

#[test]
fn unmatched_pair_blocks() {
    let s = lone();
    let out = FuturesOutcome::empty(&s);
    let report = audit_futures(&s, &out, opts());
    assert_eq!(report.blocking_pairs, vec![BlockingPair { mu: 0, es: 0, kind: 2 }]);
    assert!(!report.passed());
}

#[test]
fn overpriced_contract_breaks_rationality() {
    let s = lone();
    let mut out = run_oa_clm(&s).unwrap();
    out.ue_contracts[0].price = 100.0;
    out.mu_level[0] = 100.0;
    assert!(!check_individual_rationality(&s, &out, &opts()).is_empty());
}

#[test]
fn price_above_the_clock_level_breaks_equilibrium() {
    let s = lone();
    let mut out = run_oa_clm(&s).unwrap();
    out.ue_contracts[0].price += 0.5;
    assert!(!check_competitive_equilibrium(&s, &out, &opts()).is_empty());
}

#[test]
fn idle_capacity_admits_a_pareto_improvement() {
    let s = lone();
    let report = audit_futures(&s, &FuturesOutcome::empty(&s), opts());
    assert!(report.pareto_checked);
    let w = report.pareto_witness.expect("witness");
    assert_eq!(w.assignment, vec![Some(0)]);
    assert!(w.sw_gain > 0.0);
}

#[test]
fn contract_at_the_slower_server_is_blocked_by_the_faster() {
    let mut slow = es(0, 1, 1);
    slow.f_e = 2.0e9;
    let s = scenario(vec![mu(0, 1.0, vec![0, 1])], vec![slow, es(1, 1, 1)], vec![cs(0, 2, 0.5)]);
    let fair = run_oa_clm(&s).unwrap();
    assert_eq!(fair.mu_es[0], Some(1));
    let mut out = FuturesOutcome::empty(&s);
    out.ue_contracts = vec![fair.ue_contracts[0]];
    out.ue_contracts[0].es = 0;
    out.mu_es[0] = Some(0);
    out.omega[0] = vec![0];
    out.mu_level = fair.mu_level.clone();
    let report = audit_futures(&s, &out, opts());
    assert_eq!(report.blocking_pairs, vec![BlockingPair { mu: 0, es: 1, kind: 2 }]);
}

#[test]
fn dropped_cloud_slot_is_a_blocking_coalition() {
    // Both attend 81% of the time, so the slot pays for itself.
    let s = scenario(vec![mu(0, 0.9, vec![0]), mu(1, 0.9, vec![0])], vec![es(0, 1, 2)], vec![cs(0, 2, 0.1)]);
    let mut out = run_oa_clm_with(&s, RiskMode::Ignored).unwrap();
    assert!(audit_futures(&s, &out, opts()).passed());
    // Pretend the slot never found a CS, with a ceiling at the price CS 0 took.
    let price = out.slots[0].price;
    out.slots[0].status = SlotStatus::Unbooked;
    out.slots[0].cs = None;
    out.slots[0].rank = None;
    out.slots[0].p_max = price;
    out.ec_contracts.clear();
    out.offload_sets.clear();
    out.phi[0].clear();
    let coalitions = find_blocking_coalitions(&s, &out, &opts());
    assert!(coalitions.iter().any(|c| c.cs == 0 && c.ess == vec![0]), "{coalitions:?}");
}

fn spot_market() -> SpotMarket {
    SpotMarket {
        mus: vec![SpotMu { mu: 0, options: vec![SpotOption { es: 0, value: 5.0, cost: 0.5 }] }],
        ess: vec![SpotEs { free_local: 1, room: 1 }],
        cs_free: vec![2],
    }
}

#[test]
fn spot_auditor_flags_an_idle_buyer_and_an_overcharge() {
    let s = lone();
    let m = spot_market();
    let idle = SpotOutcome { mu_level: vec![s.params.p_min_ue], es_supply: vec![1], omega_spot: vec![vec![]], ..Default::default() };
    let report = audit_spot(&s, &m, &idle, opts());
    assert!(!report.ce_violations.is_empty());
    assert_eq!(report.blocking_pairs, vec![BlockingPair { mu: 0, es: 0, kind: 2 }]);

    let over = SpotOutcome {
        assignments: vec![SpotAssignment { mu: 0, es: 0, price: 6.0, cloud: None }],
        mu_level: vec![6.0],
        es_supply: vec![1],
        omega_spot: vec![vec![0]],
        ..Default::default()
    };
    assert!(!audit_spot(&s, &m, &over, opts()).ir_violations.is_empty());
}
