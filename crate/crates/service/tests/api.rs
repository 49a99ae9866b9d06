mod common;

use std::time::Duration;

use common::*;
use enertrade_core::auction::ClearingResult;
use enertrade_core::ledger::{Channel, Digest};
use enertrade_service::config::{Cadence, ChannelSpec};
use enertrade_service::Server;
use reqwest::StatusCode;
use serde_json::{json, Value};

async fn demo() -> (tempfile::TempDir, Server, Api) {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let server = Server::start(&config(dir.path(), vec![manual(dir.path())]))
        .await
        .unwrap();
    let api = Api::new(&server);
    (dir, server, api)
}

#[tokio::test]
async fn interval_lifecycle() {
    let (_dir, server, api) = demo().await;
    let r = api.open("demo", json!({})).await;
    assert_eq!(r.status(), StatusCode::CREATED);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["interval"], 1);
    assert_eq!(body["spec"]["start_minute"], 0);
    assert_eq!(body["spec"]["length_minutes"], 15);

    assert_eq!(
        api.open("demo", json!({})).await.status(),
        StatusCode::CONFLICT
    );
    let r = api
        .post(H1, "/channels/demo/intervals")
        .json(&json!({}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = api
        .post(H1, "/channels/demo/intervals/1/close")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);

    let r = api.close("demo", 1).await;
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["result"]["mcp"], Value::Null);
    assert_eq!(body["result"]["cleared_quantity"], 0);
    assert_eq!(api.close("demo", 1).await.status(), StatusCode::CONFLICT);

    let r = api.open("demo", json!({})).await;
    assert_eq!(r.status(), StatusCode::CREATED);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["interval"], 2);
    assert_eq!(body["spec"]["start_minute"], 15);
    server.stop().await;
}

#[tokio::test]
async fn two_bid_instance_clears_at_the_midpoint() {
    let (dir, server, api) = demo().await;
    api.open("demo", json!({})).await;
    let sell = api.bid(H1, "demo", 1, single("pv", "Sell", 1000, 50)).await;
    assert_eq!(sell.status(), StatusCode::ACCEPTED);
    let tx: Value = sell.json().await.unwrap();
    assert_eq!(tx["tx"].as_str().unwrap().len(), 64);
    let buy = api
        .bid(H2, "demo", 1, single("load", "Buy", 1000, 110))
        .await;
    assert_eq!(buy.status(), StatusCode::ACCEPTED);

    let r = api.close("demo", 1).await;
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().await.unwrap();
    // One crossing pair: the price is halfway between ask and bid.
    assert_eq!(body["result"]["mcp"], (50 + 110) / 2);
    assert_eq!(body["result"]["cleared_quantity"], 1000);
    let result: ClearingResult = serde_json::from_value(body["result"].clone()).unwrap();
    assert_eq!(body["result_digest"], Digest::of(&result).to_hex());

    let (status, text) = api.text(OPERATOR, "/channels/demo/intervals/1").await;
    assert_eq!(status, StatusCode::OK);
    let view: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(view["result"], body["result"]);
    assert_eq!(view["phase"], "Cleared");
    server.stop().await;

    // The persisted ledger holds the same record.
    let channel = Channel::reopen(dir.path().join("data/demo")).unwrap();
    let stored = channel.state().interval(1).unwrap().result.clone().unwrap();
    assert_eq!(stored, result);
}

#[tokio::test]
async fn bid_rules_map_to_statuses() {
    let (_dir, server, api) = demo().await;
    api.open("demo", json!({})).await;
    let rising = json!({ "device": "load", "side": "Buy", "points": [
        { "quantity": 500, "price": 50 }, { "quantity": 1000, "price": 90 } ] });
    assert_eq!(
        api.bid(H2, "demo", 1, rising).await.status(),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let negative = single("load", "Buy", 500, -5);
    assert_eq!(
        api.bid(H2, "demo", 1, negative).await.status(),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let mut foreign = single("bess", "Sell", 500, 100);
    foreign["owner"] = json!("h2");
    assert_eq!(
        api.bid(H1, "demo", 1, foreign).await.status(),
        StatusCode::FORBIDDEN
    );
    assert_eq!(
        api.bid(H1, "demo", 1, single("bess", "Sell", 500, 100))
            .await
            .status(),
        StatusCode::FORBIDDEN
    );
    assert_eq!(
        api.bid(H1, "demo", 1, single("pv", "Buy", 500, 100))
            .await
            .status(),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        api.bid(H1, "demo", 2, single("pv", "Sell", 500, 10))
            .await
            .status(),
        StatusCode::CONFLICT
    );
    assert_eq!(
        api.bid(H1, "demo", 1, single("pv", "Sell", 500, 10))
            .await
            .status(),
        StatusCode::ACCEPTED
    );
    assert_eq!(
        api.bid(H1, "demo", 1, single("pv", "Sell", 600, 10))
            .await
            .status(),
        StatusCode::CONFLICT
    );
    api.close("demo", 1).await;
    assert_eq!(
        api.bid(H2, "demo", 1, single("load", "Buy", 500, 90))
            .await
            .status(),
        StatusCode::CONFLICT
    );
    let r = api
        .bid(OUTSIDER, "demo", 1, single("load", "Buy", 500, 90))
        .await;
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    server.stop().await;
}

#[tokio::test]
async fn homeowners_see_only_their_own_bids() {
    let (_dir, server, api) = demo().await;
    api.open("demo", json!({})).await;
    api.bid(H1, "demo", 1, single("pv", "Sell", 700, 20)).await;
    api.bid(H2, "demo", 1, single("load", "Buy", 400, 90)).await;
    let own: Value = api
        .get(H1, "/channels/demo/intervals/1")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let bids = own["bids"].as_array().unwrap();
    assert_eq!(bids.len(), 1);
    assert_eq!(bids[0]["owner"], "h1");
    let all: Value = api
        .get(OPERATOR, "/channels/demo/intervals/1")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(all["bids"].as_array().unwrap().len(), 2);
    server.stop().await;
}

#[tokio::test]
async fn chain_pages_and_errors() {
    let (_dir, server, api) = demo().await;
    let (status, text) = api.text(H1, "/channels/demo/chain?from=0").await;
    assert_eq!(status, StatusCode::OK);
    let page: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(page["height"], 1);
    assert_eq!(page["blocks"].as_array().unwrap().len(), 1);
    assert_eq!(page["blocks"][0]["height"], 0);
    assert_eq!(
        api.text(H1, "/channels/demo/chain?from=1").await.0,
        StatusCode::RANGE_NOT_SATISFIABLE
    );
    assert_eq!(
        api.text(H1, "/channels/nowhere/chain").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        api.text(OUTSIDER, "/channels/demo/chain").await.0,
        StatusCode::FORBIDDEN
    );
    assert_eq!(
        api.text("bogus", "/channels/demo/chain").await.0,
        StatusCode::UNAUTHORIZED
    );
    let r = api
        .client
        .get(format!("{}/channels/demo/chain", api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);

    api.open("demo", json!({})).await;
    api.close("demo", 1).await;
    let page: Value = api
        .get(H1, "/channels/demo/chain?from=1&limit=1")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(page["height"], 3);
    assert_eq!(page["blocks"].as_array().unwrap().len(), 1);
    assert_eq!(page["blocks"][0]["height"], 1);
    server.stop().await;
}

#[tokio::test]
async fn idempotent_retries_commit_once() {
    let (_dir, server, api) = demo().await;
    let send = || {
        api.post(OPERATOR, "/channels/demo/intervals")
            .header("Idempotency-Key", "open-1")
            .json(&json!({}))
            .send()
    };
    let a = send().await.unwrap();
    assert_eq!(a.status(), StatusCode::CREATED);
    let a: Value = a.json().await.unwrap();
    let b = send().await.unwrap();
    assert_eq!(b.status(), StatusCode::CREATED);
    let b: Value = b.json().await.unwrap();
    assert_eq!(a, b);
    let bid = || {
        api.post(H1, "/channels/demo/intervals/1/bids")
            .header("Idempotency-Key", "pv-1")
            .json(&single("pv", "Sell", 300, 10))
            .send()
    };
    let x: Value = bid().await.unwrap().json().await.unwrap();
    let y: Value = bid().await.unwrap().json().await.unwrap();
    assert_eq!(x, y);
    let page: Value = api
        .get(OPERATOR, "/channels/demo/chain")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(page["height"], 3);
    server.stop().await;
}

#[tokio::test]
async fn request_cap_per_token() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let mut cfg = config(dir.path(), vec![manual(dir.path())]);
    cfg.rate_limit_per_minute = 3;
    let server = Server::start(&cfg).await.unwrap();
    let api = Api::new(&server);
    for _ in 0..3 {
        assert_eq!(
            api.text(H1, "/channels/demo/intervals").await.0,
            StatusCode::OK
        );
    }
    assert_eq!(
        api.text(H1, "/channels/demo/intervals").await.0,
        StatusCode::TOO_MANY_REQUESTS
    );
    assert_eq!(
        api.text(H2, "/channels/demo/intervals").await.0,
        StatusCode::OK
    );
    server.stop().await;
}

#[tokio::test]
async fn measurements_and_helpful_ev_preview() {
    let (_dir, server, api) = demo().await;
    let r = api.open("demo", json!({ "start_minute": 18 * 60 })).await;
    assert_eq!(r.status(), StatusCode::CREATED);
    let m = json!({ "device": "ev", "interval": 1, "reading": { "StateOfCharge": { "soc": 30000, "plugged": true } } });
    let r = api
        .post(H3, "/channels/demo/measurements")
        .json(&m)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let again = api
        .post(H3, "/channels/demo/measurements")
        .json(&m)
        .send()
        .await
        .unwrap();
    assert_eq!(again.status(), StatusCode::CONFLICT);
    let wrong = json!({ "device": "pv", "interval": 1, "reading": { "Temperature": { "centi_celsius": 2000 } } });
    let r = api
        .post(H1, "/channels/demo/measurements")
        .json(&wrong)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let preview = |strategy: &str| {
        api.post(H3, "/channels/demo/bid-preview")
            .json(&json!({ "device": "ev", "strategy": strategy }))
            .send()
    };
    let helpful: Value = preview("helpful").await.unwrap().json().await.unwrap();
    let selfish: Value = preview("selfish").await.unwrap().json().await.unwrap();
    let h = &helpful["curves"][0];
    let s = &selfish["curves"][0];
    // At arrival a helpful EV asks for nothing yet; selfish asks for full power.
    assert!(
        helpful["curves"].as_array().unwrap().is_empty()
            || h["points"][0]["quantity"].as_i64() < s["points"][0]["quantity"].as_i64()
    );
    assert_eq!(s["points"][0]["price"], 1000);
    assert_eq!(s["points"][0]["quantity"], 1650);

    let body = json!({ "device": "ev", "side": "Buy", "points": s["points"] });
    assert_eq!(
        api.bid(H3, "demo", 1, body).await.status(),
        StatusCode::ACCEPTED
    );

    let missing = api
        .post(H2, "/channels/demo/bid-preview")
        .json(&json!({ "device": "bess" }))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), StatusCode::CONFLICT);
    let load: Value = api
        .post(H2, "/channels/demo/bid-preview")
        .json(&json!({ "device": "load", "load_kwh": 0.5 }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(load["curves"][0]["points"][0]["quantity"], 500);
    server.stop().await;
}

#[tokio::test]
async fn feed_is_gapless_and_resumable() {
    let (_dir, server, api) = demo().await;
    api.open("demo", json!({})).await;
    let first = api.get(H1, "/channels/demo/feed").send().await.unwrap();
    assert_eq!(first.status(), StatusCode::OK);
    api.bid(H1, "demo", 1, single("pv", "Sell", 500, 10)).await;
    api.close("demo", 1).await;
    let events = read_events(first, 4).await;
    let kinds: Vec<&str> = events.iter().map(|e| e.1.as_str()).collect();
    assert_eq!(
        kinds,
        [
            "bid_accepted",
            "block_committed",
            "interval_cleared",
            "block_committed"
        ]
    );
    for w in events.windows(2) {
        assert_eq!(w[1].0, w[0].0 + 1);
    }
    assert!(events[0].2.get("points").is_none());

    // Resume after the first two events.
    let resumed = api
        .get(H1, "/channels/demo/feed")
        .header("Last-Event-ID", events[1].0.to_string())
        .send()
        .await
        .unwrap();
    let again = read_events(resumed, 2).await;
    assert_eq!(again[0].0, events[2].0);
    assert_eq!(again[0].2, events[2].2);
    assert_eq!(again[1].0, events[3].0);

    // From the very start: genesis first.
    let all = api
        .get(H1, "/channels/demo/feed?from=0")
        .send()
        .await
        .unwrap();
    let all = read_events(all, 1).await;
    assert_eq!(all[0].0, 0);
    assert_eq!(all[0].1, "block_committed");
    server.stop().await;
}

async fn snapshot(api: &Api) -> Vec<(StatusCode, String)> {
    let mut out = Vec::new();
    for path in [
        "/channels/demo/chain?from=0",
        "/channels/demo/intervals",
        "/channels/demo/intervals/1",
        "/channels/demo/intervals/2",
        "/channels/demo/timeseries",
        "/channels/demo/timeseries?series=mcp,h3/ev",
    ] {
        out.push(api.text(OPERATOR, path).await);
    }
    out
}

#[tokio::test]
async fn restart_serves_identical_answers() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let cfg = config(dir.path(), vec![manual(dir.path())]);
    let server = Server::start(&cfg).await.unwrap();
    let api = Api::new(&server);
    api.open("demo", json!({})).await;
    api.bid(H1, "demo", 1, single("pv", "Sell", 800, 40)).await;
    api.bid(H2, "demo", 1, single("load", "Buy", 1000, 120))
        .await;
    api.close("demo", 1).await;
    api.open("demo", json!({})).await;
    api.bid(H2, "demo", 2, single("load", "Buy", 200, 120))
        .await;
    let before = snapshot(&api).await;
    assert!(before.iter().all(|(s, _)| *s == StatusCode::OK));
    server.stop().await;

    let server = Server::start(&cfg).await.unwrap();
    let api = Api::new(&server);
    assert_eq!(snapshot(&api).await, before);
    // And the market carries on where it stopped.
    assert_eq!(api.close("demo", 2).await.status(), StatusCode::OK);
    server.stop().await;
}

#[tokio::test]
async fn serves_dashboard_assets() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let assets = dir.path().join("dist");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>dashboard</html>").unwrap();
    let mut cfg = config(dir.path(), vec![manual(dir.path())]);
    cfg.static_dir = Some(assets);
    let server = Server::start(&cfg).await.unwrap();
    let api = Api::new(&server);
    let r = api
        .client
        .get(format!("{}/", api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.text().await.unwrap(), "<html>dashboard</html>");
    let r = api
        .client
        .get(format!("{}/index.html", api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = api
        .client
        .get(format!("{}/healthz", api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.text().await.unwrap(), "ok");
    server.stop().await;
}

#[tokio::test]
async fn timer_cadence_opens_and_closes() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let spec = ChannelSpec {
        cadence: Cadence::Timer,
        tick_ms: 40,
        ..manual(dir.path())
    };
    let server = Server::start(&config(dir.path(), vec![spec]))
        .await
        .unwrap();
    let api = Api::new(&server);
    let mut cleared = 0;
    for _ in 0..100 {
        tokio::time::sleep(Duration::from_millis(40)).await;
        let list: Value = api
            .get(H1, "/channels/demo/intervals")
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        cleared = list
            .as_array()
            .unwrap()
            .iter()
            .filter(|i| i["phase"] == "Cleared")
            .count();
        if cleared >= 3 {
            break;
        }
    }
    assert!(cleared >= 3);
    let list: Value = api
        .get(H1, "/channels/demo/intervals")
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let starts: Vec<i64> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["start_minute"].as_i64().unwrap())
        .collect();
    assert!(starts.windows(2).all(|w| w[1] == w[0] + 15));
    server.stop().await;
}

#[tokio::test]
async fn simulated_field_test_shows_battery_steps() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let spec = ChannelSpec {
        scenario: scenarios_dir().join("kcm.toml"),
        cadence: Cadence::Simulate,
        tick_ms: 5,
    };
    let server = Server::start(&config(dir.path(), vec![spec]))
        .await
        .unwrap();
    let api = Api::new(&server);
    let mut series = Value::Null;
    for _ in 0..400 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        series = api
            .get(OPERATOR, "/channels/kcm/timeseries?series=pcc_kw,mcp")
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if series["intervals"].as_array().unwrap().len() == 24 {
            break;
        }
    }
    let pcc: Vec<f64> = series["series"]["pcc_kw"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    assert_eq!(pcc.len(), 23);
    for (i, w) in pcc.windows(2).enumerate() {
        let want = if i % 2 == 0 { -6.0 } else { 6.0 };
        assert!(
            (w[1] - w[0] - want).abs() <= 0.06,
            "step {i}: {}",
            w[1] - w[0]
        );
    }
    let r = api.open("kcm", json!({})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    server.stop().await;
}
