//! HTTP routes.
//!
//! Units on the wire are the ledger's: energy in Wh, prices in m$/kWh,
//! money in µ$, power in W. Digests are hex strings.

use std::convert::Infallible;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use enertrade_core::bidding::BidPoint;
use enertrade_core::ids::{ChannelId, DeviceId, HomeId, IntervalId};
use enertrade_core::ledger::{ChannelError, ContractError};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::BroadcastStream;
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

use crate::auth::{ApiSession, RateLimiter, TokenRegistry};
use crate::market::{
    BidRequest, LiveChannel, Market, MarketError, MeasurementRequest, OpenRequest, PreviewRequest,
};

#[derive(Clone)]
pub struct AppState {
    pub market: Market,
    pub tokens: Arc<TokenRegistry>,
    pub limiter: Arc<RateLimiter>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.status.canonical_reason().unwrap_or("error"),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

fn contract_status(e: &ContractError) -> StatusCode {
    use ContractError::*;
    match e {
        NotOperator(_) | NotOwner { .. } | UnknownDevice(..) => StatusCode::FORBIDDEN,
        AlreadyOpen(_)
        | PhaseViolation { .. }
        | IntervalId { .. }
        | UnknownInterval(_)
        | DuplicateBid(_)
        | DuplicateMeasurement(..)
        | MissingMeasurement(..)
        | NotPlugged(..) => StatusCode::CONFLICT,
        Curve(_) | SideNotAllowed(..) | ExceedsEnvelope { .. } | ReadingKind | EmptyInterval => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        Auction(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<MarketError> for ApiError {
    fn from(e: MarketError) -> ApiError {
        let status = match &e {
            MarketError::Forbidden(_) => StatusCode::FORBIDDEN,
            MarketError::NotFound(_) => StatusCode::NOT_FOUND,
            MarketError::Conflict(_) => StatusCode::CONFLICT,
            MarketError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            MarketError::BeyondTip { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
            MarketError::Ledger(ChannelError::Rejected(c)) => contract_status(c),
            MarketError::Ledger(ChannelError::NotMember(..)) => StatusCode::FORBIDDEN,
            MarketError::Ledger(ChannelError::Duplicate(_)) => StatusCode::CONFLICT,
            MarketError::Ledger(ChannelError::WrongChannel { .. } | ChannelError::BadId) => {
                StatusCode::BAD_REQUEST
            }
            MarketError::Ledger(ChannelError::NoQuorum { .. }) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
struct TokenQuery {
    #[serde(default)]
    token: Option<String>,
}

fn bearer(headers: &HeaderMap, query: &TokenQuery) -> Option<String> {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_owned())
        .or_else(|| query.token.clone())
}

fn lock(live: &Mutex<LiveChannel>) -> MutexGuard<'_, LiveChannel> {
    live.lock().unwrap_or_else(|p| p.into_inner())
}

/// Authenticates the caller, applies the request cap and resolves the
/// channel.
fn session(
    state: &AppState,
    headers: &HeaderMap,
    query: &TokenQuery,
    ch: &str,
) -> ApiResult<(ApiSession, Arc<Mutex<LiveChannel>>)> {
    let token = bearer(headers, query)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
    if state.tokens.lookup(&token).is_none() {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"));
    }
    if !state.limiter.admit(&token) {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "request cap reached",
        ));
    }
    let id = ChannelId::from(ch);
    let live = state
        .market
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown channel {ch}")))?;
    let session = state
        .tokens
        .session(&token, &id)
        .ok_or_else(|| ApiError::new(StatusCode::FORBIDDEN, format!("token not valid for {ch}")))?;
    lock(&live).authorize(&session)?;
    Ok((session, live))
}

/// Runs a mutation once per idempotency key; repeats get the stored reply.
fn mutate<T: Serialize>(
    live: &Mutex<LiveChannel>,
    session: &ApiSession,
    headers: &HeaderMap,
    route: &str,
    status: StatusCode,
    op: impl FnOnce(&mut LiveChannel) -> Result<T, MarketError>,
) -> ApiResult<Response> {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(|k| format!("{}\n{route}\n{k}", session.token));
    let mut live = lock(live);
    if let Some((code, body)) = key.as_ref().and_then(|k| live.reply_for(k)) {
        let code = StatusCode::from_u16(code).unwrap_or(StatusCode::OK);
        return Ok((code, Json(body)).into_response());
    }
    let out = op(&mut live)?;
    let body = serde_json::to_value(&out)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    if let Some(k) = key {
        live.remember_reply(k, status.as_u16(), body.clone());
    }
    Ok((status, Json(body)).into_response())
}

async fn list_channels(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let token = bearer(&headers, &q)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
    let ids: Vec<&ChannelId> = state
        .market
        .ids()
        .filter(|id| state.tokens.session(&token, id).is_some())
        .collect();
    if state.tokens.lookup(&token).is_none() {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"));
    }
    Ok(Json(ids).into_response())
}

async fn open_interval(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    body: Option<Json<OpenRequest>>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    let req = body.map(|Json(b)| b).unwrap_or_default();
    mutate(&live, &s, &headers, "open", StatusCode::CREATED, |l| {
        l.open_interval(&s, &req)
    })
}

async fn list_intervals(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let (_, live) = session(&state, &headers, &q, &ch)?;
    let out = lock(&live).intervals();
    Ok(Json(out).into_response())
}

async fn get_interval(
    State(state): State<AppState>,
    UrlPath((ch, id)): UrlPath<(String, IntervalId)>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    let out = lock(&live).interval_view(&s, id)?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
struct BidBody {
    /// Home the device belongs to; the caller's own when absent.
    #[serde(default)]
    owner: Option<HomeId>,
    device: DeviceId,
    side: enertrade_core::bidding::Side,
    points: Vec<BidPoint>,
}

async fn submit_bid(
    State(state): State<AppState>,
    UrlPath((ch, id)): UrlPath<(String, IntervalId)>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    Json(body): Json<BidBody>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    if let Some(owner) = &body.owner {
        if owner.as_str() != s.peer.as_str() {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                format!("{} may not bid for {owner}/{}", s.peer, body.device),
            ));
        }
    }
    let req = BidRequest {
        device: body.device,
        side: body.side,
        points: body.points,
    };
    let route = format!("bid/{id}");
    mutate(&live, &s, &headers, &route, StatusCode::ACCEPTED, |l| {
        l.submit_bid(&s, id, req)
    })
}

async fn close_interval(
    State(state): State<AppState>,
    UrlPath((ch, id)): UrlPath<(String, IntervalId)>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    let route = format!("close/{id}");
    mutate(&live, &s, &headers, &route, StatusCode::OK, |l| {
        l.close_interval(&s, id)
    })
}

async fn submit_measurement(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    Json(req): Json<MeasurementRequest>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    mutate(
        &live,
        &s,
        &headers,
        "measurement",
        StatusCode::ACCEPTED,
        |l| l.submit_measurement(&s, req),
    )
}

async fn bid_preview(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    Json(req): Json<PreviewRequest>,
) -> ApiResult<Response> {
    let (s, live) = session(&state, &headers, &q, &ch)?;
    let out = lock(&live).preview(&s, &req)?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
struct ChainQuery {
    #[serde(default)]
    from: u64,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default)]
    token: Option<String>,
}

async fn get_chain(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<ChainQuery>,
) -> ApiResult<Response> {
    let tq = TokenQuery {
        token: q.token.clone(),
    };
    let (_, live) = session(&state, &headers, &tq, &ch)?;
    let out = lock(&live).chain_page(q.from, q.limit)?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
struct SeriesQuery {
    #[serde(default)]
    series: Option<String>,
    #[serde(default)]
    token: Option<String>,
}

async fn get_timeseries(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<SeriesQuery>,
) -> ApiResult<Response> {
    let tq = TokenQuery {
        token: q.token.clone(),
    };
    let (_, live) = session(&state, &headers, &tq, &ch)?;
    let out = lock(&live).timeseries(q.series.as_deref())?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
struct FeedQuery {
    /// First sequence number wanted.
    #[serde(default)]
    from: Option<u64>,
    #[serde(default)]
    token: Option<String>,
}

async fn feed(
    State(state): State<AppState>,
    UrlPath(ch): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<FeedQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let tq = TokenQuery {
        token: q.token.clone(),
    };
    let (_, live) = session(&state, &headers, &tq, &ch)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|seen| seen + 1);
    let (backlog, rx) = lock(&live).subscribe(resume.or(q.from));
    // A lagging subscriber is dropped; it reconnects with Last-Event-ID.
    let live_events = BroadcastStream::new(rx)
        .take_while(|r| futures::future::ready(r.is_ok()))
        .filter_map(|r| futures::future::ready(r.ok()));
    let events = stream::iter(backlog).chain(live_events).map(|e| {
        let event = Event::default()
            .id(e.seq.to_string())
            .event(e.kind())
            .json_data(&e)
            .unwrap_or_else(|_| Event::default().comment("unencodable event"));
        Ok(event)
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(health))
        .route("/channels", get(list_channels))
        .route(
            "/channels/:ch/intervals",
            post(open_interval).get(list_intervals),
        )
        .route("/channels/:ch/intervals/:id", get(get_interval))
        .route("/channels/:ch/intervals/:id/bids", post(submit_bid))
        .route("/channels/:ch/intervals/:id/close", post(close_interval))
        .route("/channels/:ch/measurements", post(submit_measurement))
        .route("/channels/:ch/bid-preview", post(bid_preview))
        .route("/channels/:ch/chain", get(get_chain))
        .route("/channels/:ch/timeseries", get(get_timeseries))
        .route("/channels/:ch/feed", get(feed))
        .with_state(state);
    let api = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.layer(TraceLayer::new_for_http())
}
