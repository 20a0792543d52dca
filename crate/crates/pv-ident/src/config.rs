//! Run-configuration files: key = value sections [plant], [filters],
//! [drem], [scenario]. Unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::error::{PvError, Result};
use crate::harness::{ScenarioConfig, ScenarioKind, DEFAULT_GAIN_MULTIPLIER};
use crate::simulator::InitialState;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    plant: PlantSection,
    filters: FilterSection,
    drem: DremSection,
    scenario: ScenarioSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantSection {
    step: f64,
    duration: f64,
    /// "steady" or an explicit capacitor voltage.
    initial_state: InitialStateValue,
    #[serde(default = "default_ripple_fraction")]
    ripple_fraction: f64,
    #[serde(default = "default_ripple_frequency")]
    ripple_frequency: f64,
    #[serde(default)]
    dump_trajectory: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum InitialStateValue {
    Marker(String),
    Voltage(f64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterSection {
    lambda: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DremSection {
    a: f64,
    c: f64,
    d: f64,
    gamma: [f64; 4],
    #[serde(default = "default_multiplier")]
    gain_multiplier: f64,
    #[serde(default = "default_cadence")]
    cadence: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    /// "stc", "modes" or "custom".
    id: String,
    /// Entries of the form "<seconds>:<mode label>".
    schedule: Vec<String>,
    #[serde(default = "default_decimation")]
    decimation: u32,
    #[serde(default)]
    out_dir: Option<String>,
}

fn default_ripple_fraction() -> f64 {
    0.05
}
fn default_ripple_frequency() -> f64 {
    20e3
}
fn default_multiplier() -> f64 {
    DEFAULT_GAIN_MULTIPLIER
}
fn default_cadence() -> u32 {
    10
}
fn default_decimation() -> u32 {
    100
}

fn parse_schedule(entries: &[String]) -> Result<Vec<(f64, String)>> {
    entries
        .iter()
        .map(|s| {
            let (t, label) = s.split_once(':').ok_or_else(|| {
                PvError::Config(format!("schedule entry '{s}' is not '<time>:<mode>'"))
            })?;
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| PvError::Config(format!("bad schedule time in '{s}'")))?;
            Ok((t, label.trim().to_string()))
        })
        .collect()
}

/// Parse a configuration file into a validated `ScenarioConfig`.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| PvError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| PvError::Config(format!("config parse error: {e}")))?;
    let kind = match file.scenario.id.as_str() {
        "stc" => ScenarioKind::StcColdStart,
        "modes" => ScenarioKind::ModeTracking,
        "custom" => ScenarioKind::Custom,
        other => {
            return Err(PvError::Config(format!(
                "scenario id must be stc|modes|custom, got '{other}'"
            )))
        }
    };
    let initial_state = match file.plant.initial_state {
        InitialStateValue::Marker(s) if s == "steady" => InitialState::SteadyState,
        InitialStateValue::Marker(s) => {
            return Err(PvError::Config(format!(
                "initial_state must be \"steady\" or a voltage, got '{s}'"
            )))
        }
        InitialStateValue::Voltage(v) => InitialState::Voltage(v),
    };
    let cfg = ScenarioConfig {
        kind,
        lambda: file.filters.lambda,
        a: file.drem.a,
        c: file.drem.c,
        d: file.drem.d,
        gains: file.drem.gamma,
        gain_multiplier: file.drem.gain_multiplier,
        plant_step: file.plant.step,
        drem_cadence: file.drem.cadence,
        duration: file.plant.duration,
        mode_schedule: parse_schedule(&file.scenario.schedule)?,
        ripple_fraction: file.plant.ripple_fraction,
        ripple_frequency: file.plant.ripple_frequency,
        initial_state,
        decimation: file.scenario.decimation,
        out_dir: file.scenario.out_dir,
        dump_trajectory: file.plant.dump_trajectory,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[plant]
step = 1e-8
duration = 0.03
initial_state = "steady"

[filters]
lambda = 6e5

[drem]
a = 1e5
c = 1e3
d = 1e2
gamma = [20.0, 20.0, 40.0, 40.0]

[scenario]
id = "stc"
schedule = ["0.0:STC"]
"#;

    #[test]
    fn parses_valid_config() {
        let cfg = parse_config(GOOD).unwrap();
        assert_eq!(cfg.kind, ScenarioKind::StcColdStart);
        assert_eq!(cfg.lambda, 6e5);
        assert_eq!(cfg.gains, [20.0, 20.0, 40.0, 40.0]);
        assert_eq!(cfg.mode_schedule, vec![(0.0, "STC".to_string())]);
        assert_eq!(cfg.decimation, 100);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = GOOD.replace("[filters]\nlambda = 6e5", "[filters]\nlambda = 6e5\nmystery = 1");
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn rejects_bad_schedule_and_id() {
        let bad = GOOD.replace("0.0:STC", "0.0 STC");
        assert!(parse_config(&bad).is_err());
        let bad = GOOD.replace("id = \"stc\"", "id = \"warp\"");
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn voltage_initial_state() {
        let cfg = parse_config(&GOOD.replace("\"steady\"", "17.9")).unwrap();
        assert_eq!(cfg.initial_state, InitialState::Voltage(17.9));
    }
}
