//! Scenario and script files.
//!
//! Both are TOML. A scenario file sets any subset of the `ScenarioConfig`
//! fields; everything left out keeps its default:
//!
//! ```toml
//! meters = 10
//! periods = 20
//! seed = 3
//! tariff = "rtp"          # "tou" | "cpp" | "rtp"
//!
//! [forecast]
//! phi_milli = [600, 400]
//! noise_sigma = 0.0
//!
//! [rtp.days.8]            # replaces the built-in history for day 8
//! a = [100, 100, ...]     # 24 hourly values
//! b = [160, 160, ...]
//! ```
//!
//! A script file lists adversary actions in order:
//!
//! ```toml
//! [[action]]
//! action = "replay"
//! src = "sm:3"
//! dst = "gw"
//! tag = "report"
//! ordinal = 4
//! after = 900010
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

use secgrid_core::sim::{AdversaryScript, ScenarioConfig};

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Missing { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl FileError {
    pub fn is_missing(&self) -> bool {
        matches!(self, FileError::Missing { .. })
    }
}

// TOML keys are always strings; going through JSON lets integer-keyed maps
// such as `rtp.days` deserialize.
fn from_toml<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let value: toml::Value = toml::from_str(text).map_err(|e| e.to_string())?;
    let json = serde_json::to_value(value).map_err(|e| e.to_string())?;
    serde_json::from_value(json).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<String, FileError> {
    std::fs::read_to_string(path).map_err(|source| FileError::Missing { path: path.to_path_buf(), source })
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, String> {
    let cfg: ScenarioConfig = from_toml(text)?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn parse_script(text: &str) -> Result<AdversaryScript, String> {
    from_toml(text)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, FileError> {
    parse_config(&read(path)?).map_err(|message| FileError::Parse { path: path.to_path_buf(), message })
}

pub fn load_script(path: &Path) -> Result<AdversaryScript, FileError> {
    parse_script(&read(path)?).map_err(|message| FileError::Parse { path: path.to_path_buf(), message })
}
