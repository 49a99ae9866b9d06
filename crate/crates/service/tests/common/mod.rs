#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use enertrade_service::config::{Cadence, ChannelSpec, ServiceConfig};
use enertrade_service::Server;
use futures::StreamExt;
use reqwest::{Client, RequestBuilder, Response, StatusCode};
use serde_json::{json, Value};

pub const OPERATOR: &str = "op-token";
pub const H1: &str = "h1-token";
pub const H2: &str = "h2-token";
pub const H3: &str = "h3-token";
pub const OUTSIDER: &str = "zed-token";

const SCENARIO: &str = r#"
name = "demo"
interval_minutes = 15
horizon_hours = 24
load_profiles = "loads.csv"
weather = "weather.csv"

[[homes]]
id = "h1"
profile = "h1"

[[homes.devices]]
kind = "pv"
id = "pv"
params = { p_rated = 5.0, derate_coeff = 0.005, t_ref = 25.0, psi = 0.96 }

[[homes]]
id = "h2"
profile = "h2"

[[homes.devices]]
kind = "bess"
id = "bess"
strategy = "selfish"
initial_soc = 6.0
params = { p_min = -4.0, p_max = 4.0, soc_min = 1.0, soc_max = 13.5, eta = 0.95 }

[[homes]]
id = "h3"
profile = "h3"

[[homes.devices]]
kind = "ev"
id = "ev"
strategy = "helpful"
soc_req = 48.0
battery = { p_min = 0.0, p_max = 6.6, soc_min = 0.0, soc_max = 60.0, eta = 0.9 }
schedule = { arrive = 18.0, depart = 7.0, soc_arrival = 30.0 }
"#;

const TOKENS: &str = r#"
[[tokens]]
token = "op-token"
peer = "operator"
role = "operator"

[[tokens]]
token = "h1-token"
peer = "h1"
role = "homeowner"

[[tokens]]
token = "h2-token"
peer = "h2"
role = "homeowner"

[[tokens]]
token = "h3-token"
peer = "h3"
role = "homeowner"

[[tokens]]
token = "zed-token"
peer = "zed"
role = "homeowner"
"#;

/// Scenario, profiles and tokens for the three-home demo community.
pub fn write_fixtures(dir: &Path) {
    let mut loads = String::from("minute,h1,h2,h3\n");
    let mut weather = String::from("minute,irradiance,temperature\n");
    for h in 0..24 {
        loads.push_str(&format!("{},1.0,1.5,0.5\n", h * 60));
        let sun = if (7..18).contains(&h) { 0.6 } else { 0.0 };
        weather.push_str(&format!("{},{sun},22\n", h * 60));
    }
    std::fs::write(dir.join("loads.csv"), loads).unwrap();
    std::fs::write(dir.join("weather.csv"), weather).unwrap();
    std::fs::write(dir.join("demo.toml"), SCENARIO).unwrap();
    std::fs::write(dir.join("tokens.toml"), TOKENS).unwrap();
}

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn config(dir: &Path, channels: Vec<ChannelSpec>) -> ServiceConfig {
    ServiceConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        data_dir: dir.join("data"),
        tokens: dir.join("tokens.toml"),
        static_dir: None,
        rate_limit_per_minute: 10_000,
        channels,
    }
}

pub fn manual(dir: &Path) -> ChannelSpec {
    ChannelSpec {
        scenario: dir.join("demo.toml"),
        cadence: Cadence::Manual,
        tick_ms: 1000,
    }
}

pub struct Api {
    pub base: String,
    pub client: Client,
}

impl Api {
    pub fn new(server: &Server) -> Api {
        Api {
            base: format!("http://{}", server.addr()),
            client: Client::new(),
        }
    }

    pub fn get(&self, token: &str, path: &str) -> RequestBuilder {
        self.client
            .get(format!("{}{path}", self.base))
            .bearer_auth(token)
    }

    pub fn post(&self, token: &str, path: &str) -> RequestBuilder {
        self.client
            .post(format!("{}{path}", self.base))
            .bearer_auth(token)
    }

    pub async fn open(&self, ch: &str, body: Value) -> Response {
        self.post(OPERATOR, &format!("/channels/{ch}/intervals"))
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    pub async fn close(&self, ch: &str, id: u64) -> Response {
        self.post(OPERATOR, &format!("/channels/{ch}/intervals/{id}/close"))
            .send()
            .await
            .unwrap()
    }

    pub async fn bid(&self, token: &str, ch: &str, id: u64, body: Value) -> Response {
        self.post(token, &format!("/channels/{ch}/intervals/{id}/bids"))
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    /// Status and raw body text.
    pub async fn text(&self, token: &str, path: &str) -> (StatusCode, String) {
        let r = self.get(token, path).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }
}

pub fn single(device: &str, side: &str, wh: i64, price: i64) -> Value {
    json!({ "device": device, "side": side, "points": [{ "quantity": wh, "price": price }] })
}

/// Reads `n` server-sent events as `(id, event, data)`.
pub async fn read_events(resp: Response, n: usize) -> Vec<(u64, String, Value)> {
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let chunk = tokio::time::timeout(Duration::from_secs(10), stream.next())
            .await
            .expect("feed stalled")
            .expect("feed ended")
            .unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let (mut id, mut event, mut data) = (None, String::new(), String::new());
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim().to_owned();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim());
                }
            }
            if let Some(id) = id {
                out.push((id, event, serde_json::from_str(&data).unwrap()));
            }
        }
    }
    out.truncate(n);
    out
}
