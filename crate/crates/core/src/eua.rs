//! EUA-style ingestion: base stations become ESs, users become MUs, and a
//! user's candidate set is every station within the coverage radius.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MarketError, Result};
use crate::model::{generate_scenario, sample_cs, sample_es, sample_mu, Scenario};
use crate::params::{MarketParams, ScenarioConfig, ScenarioFile};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters between two (lat, lon) points in degrees.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn sniff_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    [b',', b';', b'\t']
        .into_iter()
        .max_by_key(|d| header.bytes().filter(|b| b == d).count())
        .unwrap_or(b',')
}

/// Reads `(lat, lon)` rows from a delimiter-separated table with a header row.
pub fn read_coordinates(path: &Path) -> Result<Vec<(f64, f64)>> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let ingest = |row: usize, msg: String| MarketError::Ingestion { file: file.clone(), row, msg };
    let headers = reader.headers().map_err(|e| ingest(0, e.to_string()))?.clone();
    let find = |names: &[&str]| {
        headers.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
    };
    let lat = find(&["latitude", "lat"]).ok_or_else(|| ingest(0, "no latitude column".into()))?;
    let lon = find(&["longitude", "lon", "lng", "long"])
        .ok_or_else(|| ingest(0, "no longitude column".into()))?;
    let mut out = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = idx + 2;
        let rec = rec.map_err(|e| ingest(row, e.to_string()))?;
        let field = |col: usize, name: &str| -> Result<f64> {
            let raw = rec.get(col).ok_or_else(|| ingest(row, format!("missing {name}")))?;
            let v: f64 = raw.parse().map_err(|_| ingest(row, format!("unparsable {name} `{raw}`")))?;
            if !v.is_finite() {
                return Err(ingest(row, format!("non-finite {name}")));
            }
            Ok(v)
        };
        out.push((field(lat, "latitude")?, field(lon, "longitude")?));
    }
    Ok(out)
}

/// Builds a scenario from station and user tables. Compute attributes are
/// drawn from `cfg` ranges since the tables carry only coordinates; counts in
/// `cfg` other than `css` are ignored.
pub fn load_eua_scenario(
    stations_file: &Path,
    users_file: &Path,
    coverage_radius_m: f64,
    cfg: &ScenarioConfig,
    params: &MarketParams,
    seed: u64,
) -> Result<Scenario> {
    cfg.validate()?;
    params.validate()?;
    let stations = read_coordinates(stations_file)?;
    let users = read_coordinates(users_file)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ess: Vec<_> = (0..stations.len()).map(|j| sample_es(&mut rng, j, cfg)).collect();
    let css: Vec<_> = (0..cfg.css).map(|k| sample_cs(&mut rng, k, cfg)).collect();
    let mus: Vec<_> = users
        .iter()
        .enumerate()
        .map(|(i, &(ulat, ulon))| {
            let cands: Vec<usize> = stations
                .iter()
                .enumerate()
                .filter(|(_, &(slat, slon))| haversine_m(ulat, ulon, slat, slon) <= coverage_radius_m)
                .map(|(j, _)| j)
                .collect();
            sample_mu(&mut rng, i, cands, cfg)
        })
        .collect();
    let scenario = Scenario { mus, ess, css, params: params.clone() };
    scenario.validate()?;
    Ok(scenario)
}

/// Reads a TOML scenario file; EUA table paths resolve against the file's directory.
pub fn load_scenario_file(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let file = ScenarioFile::from_toml(&text)?;
    scenario_from_file(&file, path.parent().unwrap_or(Path::new(".")))
}

pub fn scenario_from_file(file: &ScenarioFile, base: &Path) -> Result<Scenario> {
    match &file.eua {
        Some(src) => load_eua_scenario(
            &base.join(&src.stations),
            &base.join(&src.users),
            src.radius_m,
            &file.generate,
            &file.params,
            file.seed,
        ),
        None => generate_scenario(&file.generate, &file.params, file.seed),
    }
}
