mod common;

use std::path::PathBuf;
use std::process::Command;

use common::*;
use hybrid_market::auction::Link;
use hybrid_market::futures::run_phase1;
use hybrid_market::metrics::*;
use hybrid_market::transaction::{run_monte_carlo, MonteCarloOptions};
use hybrid_market::{MechanismRegistry, RiskMode};

const BIN: &str = env!("CARGO_BIN_EXE_hybrid-market");

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn tmp(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn report() -> MetricsReport {
    let s = scaled_scenario(2);
    let m = MechanismRegistry::builtin();
    run_monte_carlo(&s, m.get("hybrid").unwrap(), 40, 2, MonteCarloOptions { timing: false, threads: Some(1) }).unwrap()
}

#[test]
fn reports_round_trip_at_six_digits() {
    let r = report();
    let csv = render_reports(&[r.clone()], Format::Csv).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let back = parse_reports(&csv, Format::Csv).unwrap();
    let want = r.rounded();
    assert_eq!((back[0].sw_mean, back[0].ni_mean, back[0].ptct_mean_ms), (want.sw_mean, want.ni_mean, want.ptct_mean_ms));
    assert_eq!(render_reports(&back, Format::Csv).unwrap(), csv);

    let json = render_reports(&[r.clone()], Format::Json).unwrap();
    assert_eq!(parse_reports(&json, Format::Json).unwrap(), vec![want]);
    assert!(parse_reports("a,b\n1,2\n", Format::Csv).is_err());
}

#[test]
fn export_writes_what_render_returns() {
    let r = report();
    let path = tmp("export.json");
    export_report(&r, &path, Format::for_path(&path)).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), render_reports(&[r], Format::Json).unwrap());
}

#[test]
fn one_proposal_and_its_response_count_two() {
    let s = scenario(vec![mu(0, 1.0, vec![0])], vec![es(0, 1, 1)], vec![cs(0, 2, 0.5)]);
    let ph1 = run_phase1(&s, RiskMode::Enforced).unwrap();
    assert_eq!(ph1.auction.traffic.total(), 2);
}

#[test]
fn replayed_trace_matches_the_counters() {
    use hybrid_market::auction::{Auction, Bid, ChoiceRule, Opt};
    struct One;
    impl ChoiceRule for One {
        fn choose(&self, _: usize, bids: &[Bid]) -> Vec<usize> {
            let mut b = bids.to_vec();
            b.sort_by(|x, y| y.price.total_cmp(&x.price).then(x.buyer.cmp(&y.buyer)));
            b.into_iter().take(1).map(|x| x.buyer).collect()
        }
    }
    let opts = || (0..4).map(|i| vec![Opt { seller: 0, value: 9.0, cap: 2.0 + i as f64 }]).collect();
    let mut edge = Auction::new(1, opts(), 1.0, 0.25).with_trace(Link::MuEs);
    edge.run(&One, 100).unwrap();
    assert_eq!(count_interactions(edge.trace.as_ref().unwrap()), edge.traffic.total());
    let mut cloud = Auction::new(1, opts(), 1.0, 0.25).with_trace(Link::EsCs);
    cloud.run(&One, 100).unwrap();
    assert_eq!(count_interactions(cloud.trace.as_ref().unwrap()), 0);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

#[test]
fn simulate_is_byte_stable_without_timing() {
    let path = scenario_file("tiny.toml");
    let args = ["--no-timing", "simulate", "--scenario", path.to_str().unwrap(), "--runs", "30", "--seed", "4"];
    let a = cli(&[&["--threads", "1"], &args[..]].concat());
    let b = cli(&[&["--threads", "3"], &args[..]].concat());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let rows = parse_reports(&String::from_utf8(a.stdout).unwrap(), Format::Csv).unwrap();
    assert_eq!(rows[0].mechanism, "hybrid");
    assert_eq!(rows[0].rt_ms, 0.0);
}

#[test]
fn compare_reports_every_mechanism() {
    let path = scenario_file("tiny.toml");
    let out = tmp("compare.csv");
    let o = cli(&["--no-timing", "compare", "--scenario", path.to_str().unwrap(), "--runs", "20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_reports(&std::fs::read_to_string(&out).unwrap(), Format::Csv).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.mechanism.as_str()).collect();
    assert_eq!(names, MechanismRegistry::builtin().names());
}

#[test]
fn sweep_labels_each_overbooking_rate() {
    let path = scenario_file("tiny.toml");
    let o = cli(&[
        "--no-timing", "sweep-tau", "--scenario", path.to_str().unwrap(), "--runs", "10", "--from", "0", "--to", "0.2", "--step", "0.1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_reports(&String::from_utf8(o.stdout).unwrap(), Format::Csv).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.mechanism.as_str()).collect();
    assert_eq!(names, ["hybrid@tau=0.0000", "hybrid@tau=0.1000", "hybrid@tau=0.2000"]);
}

#[test]
fn verify_fails_on_a_tampered_outcome() {
    let path = scenario_file("tiny.toml");
    let saved = tmp("outcome.json");
    let ok = cli(&["verify", "--scenario", path.to_str().unwrap(), "--save-outcome", saved.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&saved).unwrap()).unwrap();
    let contracts = v["ue_contracts"].as_array_mut().unwrap();
    assert!(!contracts.is_empty());
    contracts[0]["price"] = serde_json::json!(1000.0);
    let bad = tmp("outcome_bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = cli(&["verify", "--scenario", path.to_str().unwrap(), "--outcome", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let audit: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!audit["ir_violations"].as_array().unwrap().is_empty());
}

#[test]
fn bad_input_exits_with_two() {
    let o = cli(&["simulate", "--scenario", "/nonexistent.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let path = scenario_file("tiny.toml");
    let o = cli(&["simulate", "--scenario", path.to_str().unwrap(), "--mechanism", "vickrey"]);
    assert_eq!(o.status.code(), Some(2));
}
