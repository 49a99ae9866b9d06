//! HTTP market service: interval lifecycle, bids, results, chain inspection
//! and live feeds over the permissioned ledger.

pub mod api;
pub mod auth;
pub mod config;
pub mod feed;
pub mod market;

use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::api::AppState;
use crate::auth::{RateLimiter, TokenRegistry};
use crate::config::{Cadence, ConfigError, ServiceConfig};
use crate::market::{Market, MarketError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("binding {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

/// A running service.
pub struct Server {
    addr: SocketAddr,
    market: Market,
    shutdown: Option<oneshot::Sender<()>>,
    server: JoinHandle<()>,
    tickers: Vec<JoinHandle<()>>,
}

impl Server {
    /// Opens every channel, starts the cadence timers and listens.
    pub async fn start(config: &ServiceConfig) -> Result<Server, ServiceError> {
        config.validate()?;
        let tokens = TokenRegistry::load(&config.tokens)?;
        let market = Market::open(&config.channels, &config.data_dir)?;
        let state = AppState {
            market: market.clone(),
            tokens: Arc::new(tokens),
            limiter: Arc::new(RateLimiter::per_minute(config.rate_limit_per_minute)),
        };
        let app = api::router(state, config.static_dir.as_deref());
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|source| ServiceError::Bind {
                addr: config.listen,
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| ServiceError::Bind {
            addr: config.listen,
            source,
        })?;
        let (tx, rx) = oneshot::channel();
        let server = tokio::spawn(async move {
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, app)
                .with_graceful_shutdown(shutdown)
                .await
            {
                tracing::error!(error = %e, "server stopped");
            }
        });
        let tickers = spawn_tickers(&market);
        tracing::info!(%addr, channels = market.ids().count(), "listening");
        Ok(Server {
            addr,
            market,
            shutdown: Some(tx),
            server,
            tickers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn market(&self) -> &Market {
        &self.market
    }

    /// Stops the timers and the listener and waits for open requests.
    pub async fn stop(mut self) {
        for t in &self.tickers {
            t.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        for t in self.tickers.drain(..) {
            let _ = t.await;
        }
    }
}

fn spawn_tickers(market: &Market) -> Vec<JoinHandle<()>> {
    market
        .channels()
        .filter_map(|live| {
            let (cadence, period) = {
                let l = live.lock().unwrap_or_else(|p| p.into_inner());
                (l.cadence(), l.tick_interval())
            };
            if cadence == Cadence::Manual {
                return None;
            }
            let live = Arc::clone(live);
            Some(tokio::spawn(async move {
                // First tick one period after start, not immediately.
                let mut timer =
                    tokio::time::interval_at(tokio::time::Instant::now() + period, period);
                timer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    timer.tick().await;
                    let mut l = live.lock().unwrap_or_else(|p| p.into_inner());
                    if let Err(e) = l.tick() {
                        tracing::warn!(channel = %l.id(), error = %e, "tick failed");
                    }
                }
            }))
        })
        .collect()
}
