//! Service configuration file.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! data_dir = "data"
//! tokens = "tokens.toml"
//! static_dir = "dashboard/dist"
//! rate_limit_per_minute = 600
//!
//! [[channels]]
//! scenario = "scenarios/kcm.toml"
//! cadence = "simulate"
//! tick_ms = 1000
//! ```
//!
//! Relative paths resolve against the directory of the configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// How a channel's intervals advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// The operator opens and closes intervals through the API.
    Manual,
    /// Every tick closes the open interval and opens the next one.
    Timer,
    /// Every tick runs one interval of the channel's scenario.
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Scenario defining the community, its devices and prices. The channel
    /// id is the scenario name.
    pub scenario: PathBuf,
    #[serde(default = "default_cadence")]
    pub cadence: Cadence,
    /// Wall-clock length of one interval for timer and simulate cadence.
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
}

fn default_cadence() -> Cadence {
    Cadence::Manual
}

fn default_tick() -> u64 {
    1000
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_rate() -> u32 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Each channel persists its chain in `data_dir/<channel id>`.
    pub data_dir: PathBuf,
    /// Bearer-token registry.
    pub tokens: PathBuf,
    /// Dashboard assets served at `/` when present.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    /// Requests per token per minute.
    #[serde(default = "default_rate")]
    pub rate_limit_per_minute: u32,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<ServiceConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: ServiceConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.tokens);
        if let Some(s) = &mut self.static_dir {
            fix(s);
        }
        for c in &mut self.channels {
            fix(&mut c.scenario);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rate_limit_per_minute == 0 {
            return Err(ConfigError::Invalid(
                "rate_limit_per_minute must be positive".into(),
            ));
        }
        if let Some(c) = self
            .channels
            .iter()
            .find(|c| c.cadence != Cadence::Manual && c.tick_ms == 0)
        {
            return Err(ConfigError::Invalid(format!(
                "{}: tick_ms must be positive",
                c.scenario.display()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let mut cfg: ServiceConfig = toml::from_str(
            r#"
data_dir = "data"
tokens = "/etc/tokens.toml"
[[channels]]
scenario = "s.toml"
"#,
        )
        .unwrap();
        cfg.resolve(Path::new("/srv"));
        assert_eq!(cfg.listen, default_listen());
        assert_eq!(cfg.data_dir, Path::new("/srv/data"));
        assert_eq!(cfg.tokens, Path::new("/etc/tokens.toml"));
        assert_eq!(cfg.channels[0].cadence, Cadence::Manual);
        assert_eq!(cfg.channels[0].scenario, Path::new("/srv/s.toml"));
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_tick_rejected() {
        let cfg: ServiceConfig = toml::from_str(
            r#"
data_dir = "d"
tokens = "t"
[[channels]]
scenario = "s.toml"
cadence = "timer"
tick_ms = 0
"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
