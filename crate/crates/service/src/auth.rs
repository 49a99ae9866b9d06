//! Static bearer tokens and the per-token request cap.
//!
//! ```toml
//! [[tokens]]
//! token = "op-secret"
//! peer = "operator"
//! role = "operator"
//!
//! [[tokens]]
//! token = "h1-secret"
//! peer = "h1"
//! role = "homeowner"
//! channels = ["community8"]   # all channels when absent
//! ```

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use enertrade_core::ids::{ChannelId, PeerId};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Homeowner,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub peer: PeerId,
    pub role: Role,
    #[serde(default)]
    pub channels: Option<Vec<ChannelId>>,
}

/// An authenticated caller on one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub token: String,
    pub peer: PeerId,
    pub channel: ChannelId,
    pub role: Role,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenRegistry {
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

impl TokenRegistry {
    pub fn load(path: &Path) -> Result<TokenRegistry, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reg: TokenRegistry = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = reg.tokens.iter().find(|t| !seen.insert(&t.token)) {
            return Err(ConfigError::Invalid(format!(
                "token for {} listed twice",
                dup.peer
            )));
        }
        Ok(reg)
    }

    pub fn lookup(&self, token: &str) -> Option<&TokenEntry> {
        self.tokens.iter().find(|t| t.token == token)
    }

    /// Session for `token` on `channel`, if the token may use it.
    pub fn session(&self, token: &str, channel: &ChannelId) -> Option<ApiSession> {
        let entry = self.lookup(token)?;
        if let Some(allowed) = &entry.channels {
            if !allowed.contains(channel) {
                return None;
            }
        }
        Some(ApiSession {
            token: entry.token.clone(),
            peer: entry.peer.clone(),
            channel: channel.clone(),
            role: entry.role,
        })
    }
}

/// Fixed-window request counter per token.
#[derive(Debug)]
pub struct RateLimiter {
    limit: u32,
    window: Duration,
    counts: Mutex<HashMap<String, (Instant, u32)>>,
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> RateLimiter {
        RateLimiter::new(limit, Duration::from_secs(60))
    }

    pub fn new(limit: u32, window: Duration) -> RateLimiter {
        RateLimiter {
            limit,
            window,
            counts: Mutex::new(HashMap::new()),
        }
    }

    /// Counts one request; false once the token exceeded its cap.
    pub fn admit(&self, token: &str) -> bool {
        self.admit_at(token, Instant::now())
    }

    fn admit_at(&self, token: &str, now: Instant) -> bool {
        let mut counts = self.counts.lock().expect("rate limiter poisoned");
        let entry = counts.entry(token.to_owned()).or_insert((now, 0));
        if now.duration_since(entry.0) >= self.window {
            *entry = (now, 0);
        }
        if entry.1 >= self.limit {
            return false;
        }
        entry.1 += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_scoped_tokens() {
        let reg: TokenRegistry = toml::from_str(
            r#"
[[tokens]]
token = "a"
peer = "h1"
role = "homeowner"
channels = ["c1"]
[[tokens]]
token = "b"
peer = "operator"
role = "operator"
"#,
        )
        .unwrap();
        assert!(reg.session("a", &"c1".into()).is_some());
        assert!(reg.session("a", &"c2".into()).is_none());
        assert_eq!(reg.session("b", &"c2".into()).unwrap().role, Role::Operator);
        assert!(reg.session("zzz", &"c1".into()).is_none());
    }

    #[test]
    fn cap_resets_each_window() {
        let rl = RateLimiter::new(2, Duration::from_secs(60));
        let t0 = Instant::now();
        assert!(rl.admit_at("t", t0));
        assert!(rl.admit_at("t", t0));
        assert!(!rl.admit_at("t", t0));
        assert!(rl.admit_at("u", t0));
        assert!(rl.admit_at("t", t0 + Duration::from_secs(61)));
    }
}
