//! Two-timescale edge/cloud resource market: forward contracts negotiated
//! ahead of time under risk constraints, plus a spot market that clears
//! whatever demand the contracts do not cover.

pub mod auction;
pub mod error;
pub mod eua;
pub mod expectation;
pub mod futures;
pub mod mechanism;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spot;
pub mod transaction;
pub mod verify;

pub use error::{MarketError, Result};
pub use futures::{run_oa_clm, run_oa_clm_with, FuturesOutcome, RiskMode};
pub use model::{generate_scenario, Scenario};
pub use params::{desk_params, MarketParams, ScenarioConfig, ScenarioFile};
pub use spot::{run_os_clm, SpotOutcome};
pub use transaction::{execute_transaction, sample_transaction, TransactionOutcome, TransactionSample};
pub use mechanism::{Mechanism, MechanismRegistry};
pub use metrics::{export_report, MetricsReport};
pub use transaction::{run_monte_carlo, MonteCarloOptions};
