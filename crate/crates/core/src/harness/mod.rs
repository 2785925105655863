//! Scenario files, the runner and run reports.

mod config;
mod expect;
mod fuzz;
mod report;
mod runner;

pub use config::*;
pub use expect::Expectation;
pub use fuzz::{fuzz_decode, random_packet, FuzzStats};
pub use report::*;
pub use runner::*;

const BUNDLED: &[(&str, &str)] = &[
    ("benign", include_str!("../../scenarios/benign.json")),
    ("scenario1", include_str!("../../scenarios/scenario1.json")),
    ("scenario2", include_str!("../../scenarios/scenario2.json")),
    ("scenario3", include_str!("../../scenarios/scenario3.json")),
    ("scenario4", include_str!("../../scenarios/scenario4.json")),
    ("scenario5", include_str!("../../scenarios/scenario5.json")),
    ("scenario6", include_str!("../../scenarios/scenario6.json")),
    ("scenario7", include_str!("../../scenarios/scenario7.json")),
    ("scenario8", include_str!("../../scenarios/scenario8.json")),
    ("collusion", include_str!("../../scenarios/collusion.json")),
    ("fake_error", include_str!("../../scenarios/fake_error.json")),
    ("flood", include_str!("../../scenarios/flood.json")),
];

/// Names of the scenarios compiled into the crate.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled_source(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load_bundled(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let text = bundled_source(name).ok_or_else(|| ConfigError::Io { path: name.into(), msg: "no such bundled scenario".into() })?;
    ScenarioConfig::from_json(text)
}
