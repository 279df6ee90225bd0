//! Raw order records to labelled level-I events, per-agent daily behaviour
//! features, label-shuffled control days and decile-conditioned aggregates.
//!
//! CSV timestamps are integer nanoseconds since midnight of the trading day;
//! the session window is given in seconds on the same clock.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{Event, EventStream, Session, StreamError};
use crate::types::{AgentId, EventType, N_TYPES};

/// Default session: 08:00 to 16:30.
pub const DEFAULT_SESSION: (f64, f64) = (8.0 * 3600.0, 16.5 * 3600.0);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("crossed or locked quotes at t={t}")]
    InconsistentQuotes { t: f64 },
    #[error("row {row}: {message}")]
    SchemaViolation { row: u64, message: String },
    #[error("row {row}: unparseable timestamp {value:?}")]
    UnparseableTimestamp { row: u64, value: String },
    #[error("need at least 10 observations, got {found}")]
    TooFewObservations { found: usize },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Insert,
    Cancel,
    Modify,
    Trade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bid,
    Ask,
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "insert" => Ok(Action::Insert),
            "cancel" => Ok(Action::Cancel),
            "modify" => Ok(Action::Modify),
            "trade" => Ok(Action::Trade),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bid" | "b" | "buy" => Ok(Side::Bid),
            "ask" | "a" | "sell" => Ok(Side::Ask),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// One raw order-book message with its level-I context. For trades, `side`
/// is the book side that traded: an aggressive trade on the ask is a buy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOrderRecord {
    /// Seconds on the session clock.
    pub t: f64,
    pub agent: AgentId,
    pub action: Action,
    pub side: Side,
    /// Half-ticks.
    pub price: i64,
    pub size: f64,
    pub order_id: Option<String>,
    pub best_bid_before: i64,
    pub best_ask_before: i64,
    pub best_bid_after: i64,
    pub best_ask_after: i64,
    /// Trades only: whether this agent initiated the trade.
    pub aggressor: Option<bool>,
}

/// Why a record produced no event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Activity away from the best quotes.
    DeepBook,
    /// Resting side of a trade; the aggressor's record carries the event.
    PassiveFill,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classification {
    Event { kind: EventType, delta: f64 },
    Dropped(DropReason),
}

/// Maps a record to one of the eight level-I types, or drops it.
pub fn classify(r: &RawOrderRecord) -> Result<Classification, PipelineError> {
    if r.best_bid_before >= r.best_ask_before || r.best_bid_after >= r.best_ask_after {
        return Err(PipelineError::InconsistentQuotes { t: r.t });
    }
    if r.action == Action::Trade && r.aggressor == Some(false) {
        return Ok(Classification::Dropped(DropReason::PassiveFill));
    }
    let twice_mid_change = (r.best_bid_after + r.best_ask_after) - (r.best_bid_before + r.best_ask_before);
    if twice_mid_change != 0 {
        let delta = twice_mid_change as f64 / 2.0;
        let kind = if delta > 0.0 { EventType::PriceUp } else { EventType::PriceDown };
        return Ok(Classification::Event { kind, delta });
    }
    let at_best = match r.side {
        Side::Bid => r.price == r.best_bid_before,
        Side::Ask => r.price == r.best_ask_before,
    };
    if !at_best {
        return Ok(Classification::Dropped(DropReason::DeepBook));
    }
    let kind = match (r.action, r.side) {
        (Action::Trade, Side::Ask) => EventType::TradeAsk,
        (Action::Trade, Side::Bid) => EventType::TradeBid,
        (Action::Insert, Side::Ask) => EventType::LimitAsk,
        (Action::Insert, Side::Bid) => EventType::LimitBid,
        (Action::Cancel | Action::Modify, Side::Ask) => EventType::CancelAsk,
        (Action::Cancel | Action::Modify, Side::Bid) => EventType::CancelBid,
    };
    Ok(Classification::Event { kind, delta: 0.0 })
}

/// Row accounting of one ingestion or classification pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub out_of_session: usize,
    pub deep_book: usize,
    pub passive_fills: usize,
}

/// Classifies sorted records into an event stream.
pub fn classify_records(
    records: &[RawOrderRecord],
    day: &str,
    session: Session,
) -> Result<(EventStream, IngestStats), PipelineError> {
    let mut stats = IngestStats { rows: records.len(), ..Default::default() };
    let mut events = Vec::new();
    for r in records {
        if !session.contains(r.t) {
            stats.out_of_session += 1;
            continue;
        }
        match classify(r)? {
            Classification::Event { kind, delta } => events.push(Event::new(r.t, r.agent, kind, delta)),
            Classification::Dropped(DropReason::DeepBook) => stats.deep_book += 1,
            Classification::Dropped(DropReason::PassiveFill) => stats.passive_fills += 1,
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok((EventStream::new(day, session, events)?, stats))
}

fn parse_ts(row: u64, s: &str) -> Result<f64, PipelineError> {
    s.trim()
        .parse::<i64>()
        .map(|ns| ns as f64 * 1e-9)
        .map_err(|_| PipelineError::UnparseableTimestamp { row, value: s.to_string() })
}

fn parse_agent(row: u64, s: &str) -> Result<AgentId, PipelineError> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("rest") {
        return Ok(AgentId::REST);
    }
    s.parse::<u32>()
        .map(AgentId)
        .map_err(|_| PipelineError::SchemaViolation { row, message: format!("bad agent_id {s:?}") })
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, row: u64) -> Result<&'a str, PipelineError> {
    rec.get(idx)
        .ok_or_else(|| PipelineError::SchemaViolation { row, message: format!("missing column {name}") })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, PipelineError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| PipelineError::SchemaViolation { row: 1, message: format!("missing header {name}") })
}

fn parse_num<T: FromStr>(row: u64, name: &str, s: &str) -> Result<T, PipelineError> {
    s.trim()
        .parse::<T>()
        .map_err(|_| PipelineError::SchemaViolation { row, message: format!("bad {name} {s:?}") })
}

/// Stable sort by time, then session clipping.
fn sort_and_clip<T>(mut rows: Vec<(f64, T)>, session: Session, stats: &mut IngestStats) -> Vec<(f64, T)> {
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let before = rows.len();
    rows.retain(|(t, _)| session.contains(*t));
    stats.out_of_session += before - rows.len();
    rows
}

pub const EVENTS_HEADER: [&str; 4] = ["ts_ns", "agent_id", "event_type", "delta_half_ticks"];

/// Reads a pre-classified `events.csv`.
pub fn read_events_csv<R: Read>(
    input: R,
    day: &str,
    session: Session,
) -> Result<(EventStream, IngestStats), PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = EVENTS_HEADER.iter().map(|h| column_index(&headers, h)).collect::<Result<_, _>>()?;
    let mut stats = IngestStats::default();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        stats.rows += 1;
        let t = parse_ts(row, field(&rec, idx[0], "ts_ns", row)?)?;
        let agent = parse_agent(row, field(&rec, idx[1], "agent_id", row)?)?;
        let kind: EventType = field(&rec, idx[2], "event_type", row)?
            .parse()
            .map_err(|e: crate::types::UnknownEventType| PipelineError::SchemaViolation { row, message: e.to_string() })?;
        let delta: f64 = parse_num(row, "delta_half_ticks", field(&rec, idx[3], "delta_half_ticks", row)?)?;
        if !kind.delta_consistent(delta) {
            return Err(PipelineError::SchemaViolation {
                row,
                message: format!("jump {delta} inconsistent with type {kind}"),
            });
        }
        rows.push((t, Event::new(t, agent, kind, delta)));
    }
    let rows = sort_and_clip(rows, session, &mut stats);
    let stream = EventStream::new(day, session, rows.into_iter().map(|(_, e)| e).collect())?;
    Ok((stream, stats))
}

/// Writes an event stream in the `events.csv` schema.
pub fn write_events_csv<W: Write>(stream: &EventStream, out: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENTS_HEADER)?;
    for e in stream.events() {
        w.write_record([
            format!("{}", (e.t * 1e9).round() as i64),
            e.agent.0.to_string(),
            e.kind.code().to_string(),
            format!("{}", e.delta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const RAW_HEADER: [&str; 12] = [
    "ts_ns", "agent_id", "action", "side", "price_ht", "size", "order_id", "bb_pre", "ba_pre", "bb_post", "ba_post",
    "aggressor",
];

fn parse_flag(row: u64, s: &str) -> Result<Option<bool>, PipelineError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "1" | "true" | "t" | "y" | "yes" => Ok(Some(true)),
        "0" | "false" | "f" | "n" | "no" => Ok(Some(false)),
        other => Err(PipelineError::SchemaViolation { row, message: format!("bad aggressor {other:?}") }),
    }
}

/// Reads `raw.csv` records, sorted and clipped to the session.
pub fn read_raw_csv<R: Read>(input: R, session: Session) -> Result<(Vec<RawOrderRecord>, IngestStats), PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = RAW_HEADER.iter().map(|h| column_index(&headers, h)).collect::<Result<_, _>>()?;
    let mut stats = IngestStats::default();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        stats.rows += 1;
        let get = |i: usize| field(&rec, idx[i], RAW_HEADER[i], row);
        let t = parse_ts(row, get(0)?)?;
        let action: Action = get(2)?.parse().map_err(|m| PipelineError::SchemaViolation { row, message: m })?;
        let side: Side = get(3)?.parse().map_err(|m| PipelineError::SchemaViolation { row, message: m })?;
        let order_id = Some(get(6)?.trim()).filter(|s| !s.is_empty()).map(str::to_string);
        let aggressor = parse_flag(row, get(11)?)?;
        if action == Action::Trade && aggressor.is_none() {
            return Err(PipelineError::SchemaViolation { row, message: "trade without aggressor flag".into() });
        }
        let r = RawOrderRecord {
            t,
            agent: parse_agent(row, get(1)?)?,
            action,
            side,
            price: parse_num(row, "price_ht", get(4)?)?,
            size: parse_num(row, "size", get(5)?)?,
            order_id,
            best_bid_before: parse_num(row, "bb_pre", get(7)?)?,
            best_ask_before: parse_num(row, "ba_pre", get(8)?)?,
            best_bid_after: parse_num(row, "bb_post", get(9)?)?,
            best_ask_after: parse_num(row, "ba_post", get(10)?)?,
            aggressor,
        };
        rows.push((t, r));
    }
    let rows = sort_and_clip(rows, session, &mut stats);
    Ok((rows.into_iter().map(|(_, r)| r).collect(), stats))
}

/// Permutes agent labels within each event type, keeping times, types,
/// jumps and every per-(agent, type) count.
pub fn shuffle_control(stream: &EventStream, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = stream.events();
    let mut labels: Vec<AgentId> = events.iter().map(|e| e.agent).collect();
    for kind in EventType::ALL {
        let idx: Vec<usize> = (0..events.len()).filter(|i| events[*i].kind == kind).collect();
        let mut pool: Vec<AgentId> = idx.iter().map(|i| events[*i].agent).collect();
        pool.shuffle(&mut rng);
        for (i, a) in idx.into_iter().zip(pool) {
            labels[i] = a;
        }
    }
    stream.relabelled(&labels)
}

/// Daily behaviour features of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyAgentFeatures {
    pub day: String,
    pub agent: AgentId,
    /// `|net traded size| / traded size`, percent.
    pub eod_position_ratio: Option<f64>,
    /// Median insert-to-cancel time, seconds.
    pub order_lifetime_median: Option<f64>,
    /// Median time between the agent's own level-I events, seconds.
    pub inter_event_time_median: Option<f64>,
    /// Share of traded size where the agent was aggressor, percent.
    pub aggressive_volume_fraction: Option<f64>,
    /// Time present at the best quotes, percent; supplied externally.
    pub presence_l1: Option<f64>,
    pub counts: [usize; N_TYPES],
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Names accepted by [`DailyAgentFeatures::feature`].
pub const FEATURE_NAMES: [&str; 5] = [
    "eod_position_ratio",
    "order_lifetime_median",
    "inter_event_time_median",
    "aggressive_volume_fraction",
    "presence_l1",
];

impl DailyAgentFeatures {
    pub fn feature(&self, name: &str) -> Option<f64> {
        match name {
            "eod_position_ratio" => self.eod_position_ratio,
            "order_lifetime_median" => self.order_lifetime_median,
            "inter_event_time_median" => self.inter_event_time_median,
            "aggressive_volume_fraction" => self.aggressive_volume_fraction,
            "presence_l1" => self.presence_l1,
            _ => None,
        }
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Computes one agent's daily features from its raw records and its events.
pub fn compute_features(
    records: &[RawOrderRecord],
    stream: &EventStream,
    agent: AgentId,
    presence: Option<f64>,
) -> DailyAgentFeatures {
    let mut own: Vec<&RawOrderRecord> = records.iter().filter(|r| r.agent == agent).collect();
    own.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut flags = Vec::new();

    let (mut net, mut volume, mut aggressive) = (0.0, 0.0, 0.0);
    for r in own.iter().filter(|r| r.action == Action::Trade) {
        let initiated = r.aggressor.unwrap_or(false);
        let buy = matches!((r.side, initiated), (Side::Ask, true) | (Side::Bid, false));
        net += if buy { r.size } else { -r.size };
        volume += r.size;
        if initiated {
            aggressive += r.size;
        }
    }
    let eod_position_ratio = (volume > 0.0).then(|| 100.0 * net.abs() / volume);
    let aggressive_volume_fraction = (volume > 0.0).then(|| 100.0 * aggressive / volume);

    let mut open: HashMap<&str, f64> = HashMap::new();
    let mut lifetimes = Vec::new();
    let mut missing_ids = false;
    for r in own.iter().filter(|r| r.action != Action::Trade) {
        let Some(id) = r.order_id.as_deref() else {
            missing_ids = true;
            continue;
        };
        match r.action {
            Action::Insert => {
                open.insert(id, r.t);
            }
            Action::Cancel => {
                if let Some(t0) = open.remove(id) {
                    lifetimes.push(r.t - t0);
                }
            }
            Action::Modify => {
                if let Some(t0) = open.insert(id, r.t) {
                    lifetimes.push(r.t - t0);
                }
            }
            Action::Trade => {}
        }
    }
    let order_lifetime_median = if missing_ids {
        flags.push("missing order ids, lifetime not computed".to_string());
        None
    } else {
        median(lifetimes)
    };

    let times: Vec<f64> = stream.events().iter().filter(|e| e.agent == agent).map(|e| e.t).collect();
    let gaps = times.windows(2).map(|w| w[1] - w[0]).collect();

    DailyAgentFeatures {
        day: stream.day.clone(),
        agent,
        eod_position_ratio,
        order_lifetime_median,
        inter_event_time_median: median(gaps),
        aggressive_volume_fraction,
        presence_l1: presence,
        counts: stream.counts(agent),
        flags,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes features as one row per (agent, day).
pub fn write_features_csv<W: Write>(rows: &[DailyAgentFeatures], out: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["day".into(), "agent_id".into()];
    header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    header.extend(EventType::ALL.iter().map(|k| format!("n_{}", k.code())));
    header.push("flags".into());
    w.write_record(&header)?;
    for f in rows {
        let mut rec = vec![f.day.clone(), f.agent.0.to_string()];
        rec.extend(FEATURE_NAMES.iter().map(|n| opt(f.feature(n))));
        rec.extend(f.counts.iter().map(|c| c.to_string()));
        rec.push(f.flags.join("|"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_features_csv`].
pub fn read_features_csv<R: Read>(input: R) -> Result<Vec<DailyAgentFeatures>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| column_index(&headers, name);
    let day_i = col("day")?;
    let agent_i = col("agent_id")?;
    let feat_i: Vec<Option<usize>> = FEATURE_NAMES.iter().map(|n| col(n).ok()).collect();
    let count_i: Vec<Option<usize>> = EventType::ALL.iter().map(|k| col(&format!("n_{}", k.code())).ok()).collect();
    let flags_i = col("flags").ok();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: Option<usize>, name: &str| -> Result<Option<f64>, PipelineError> {
            match i.and_then(|i| rec.get(i)).map(str::trim) {
                None | Some("") => Ok(None),
                Some(s) => parse_num(row, name, s).map(Some),
            }
        };
        let mut counts = [0usize; N_TYPES];
        for (k, i) in count_i.iter().enumerate() {
            if let Some(s) = i.and_then(|i| rec.get(i)).map(str::trim).filter(|s| !s.is_empty()) {
                counts[k] = parse_num(row, "count", s)?;
            }
        }
        out.push(DailyAgentFeatures {
            day: field(&rec, day_i, "day", row)?.to_string(),
            agent: parse_agent(row, field(&rec, agent_i, "agent_id", row)?)?,
            eod_position_ratio: num(feat_i[0], FEATURE_NAMES[0])?,
            order_lifetime_median: num(feat_i[1], FEATURE_NAMES[1])?,
            inter_event_time_median: num(feat_i[2], FEATURE_NAMES[2])?,
            aggressive_volume_fraction: num(feat_i[3], FEATURE_NAMES[3])?,
            presence_l1: num(feat_i[4], FEATURE_NAMES[4])?,
            counts,
            flags: flags_i
                .and_then(|i| rec.get(i))
                .filter(|s| !s.is_empty())
                .map(|s| s.split('|').map(str::to_string).collect())
                .unwrap_or_default(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
struct PresenceRow {
    #[serde(default)]
    day: Option<String>,
    agent_id: u32,
    presence_pct: f64,
}

/// Externally supplied presence at the best quotes, keyed by (day, agent);
/// rows without a day apply to every day.
#[derive(Debug, Clone, Default)]
pub struct PresenceTable {
    by_day: HashMap<(String, AgentId), f64>,
    any_day: HashMap<AgentId, f64>,
}

impl PresenceTable {
    pub fn read<R: Read>(input: R) -> Result<Self, PipelineError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut table = Self::default();
        for row in rdr.deserialize::<PresenceRow>() {
            let row = row?;
            match row.day.filter(|d| !d.is_empty()) {
                Some(d) => {
                    table.by_day.insert((d, AgentId(row.agent_id)), row.presence_pct);
                }
                None => {
                    table.any_day.insert(AgentId(row.agent_id), row.presence_pct);
                }
            }
        }
        Ok(table)
    }

    pub fn get(&self, day: &str, agent: AgentId) -> Option<f64> {
        self.by_day.get(&(day.to_string(), agent)).or_else(|| self.any_day.get(&agent)).copied()
    }
}

/// Mean and standard error of a target within one decile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileSummary {
    pub feature: String,
    pub target: String,
    pub bins: Vec<DecileBin>,
}

/// Groups `(feature, target)` observations into feature deciles and
/// summarises the target in each. Ties keep input order.
pub fn decile_conditional_mean(
    feature: &str,
    target: &str,
    observations: &[(f64, f64)],
) -> Result<DecileSummary, PipelineError> {
    let n = observations.len();
    if n < 10 {
        return Err(PipelineError::TooFewObservations { found: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| observations[*a].0.total_cmp(&observations[*b].0));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (rank, i) in order.into_iter().enumerate() {
        groups[rank * 10 / n].push(i);
    }
    let bins = groups
        .into_iter()
        .map(|g| {
            let m = g.len() as f64;
            let ys: Vec<f64> = g.iter().map(|i| observations[*i].1).collect();
            let mean = ys.iter().sum::<f64>() / m;
            let sd = if g.len() > 1 {
                (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            DecileBin {
                lower: observations[g[0]].0,
                upper: observations[*g.last().unwrap()].0,
                count: g.len(),
                mean,
                std_error: sd / m.sqrt(),
            }
        })
        .collect();
    Ok(DecileSummary { feature: feature.to_string(), target: target.to_string(), bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(t: f64, action: Action, side: Side, price: i64, pre: (i64, i64), post: (i64, i64)) -> RawOrderRecord {
        RawOrderRecord {
            t,
            agent: AgentId(1),
            action,
            side,
            price,
            size: 1.0,
            order_id: None,
            best_bid_before: pre.0,
            best_ask_before: pre.1,
            best_bid_after: post.0,
            best_ask_after: post.1,
            aggressor: if action == Action::Trade { Some(true) } else { None },
        }
    }

    #[test]
    fn classification_cases() {
        let q = (100, 104);
        let lb = classify(&rec(0.0, Action::Insert, Side::Bid, 100, q, q)).unwrap();
        assert_eq!(lb, Classification::Event { kind: EventType::LimitBid, delta: 0.0 });
        let ta = classify(&rec(0.0, Action::Trade, Side::Ask, 104, q, q)).unwrap();
        assert_eq!(ta, Classification::Event { kind: EventType::TradeAsk, delta: 0.0 });
        // one tick (two half-ticks) bid improvement moves the mid by one half-tick
        let up = classify(&rec(0.0, Action::Insert, Side::Bid, 102, q, (102, 104))).unwrap();
        assert_eq!(up, Classification::Event { kind: EventType::PriceUp, delta: 1.0 });
        let deep = classify(&rec(0.0, Action::Insert, Side::Bid, 96, q, q)).unwrap();
        assert_eq!(deep, Classification::Dropped(DropReason::DeepBook));
        let cancel = classify(&rec(0.0, Action::Modify, Side::Ask, 104, q, q)).unwrap();
        assert_eq!(cancel, Classification::Event { kind: EventType::CancelAsk, delta: 0.0 });
        let mut passive = rec(0.0, Action::Trade, Side::Bid, 100, q, q);
        passive.aggressor = Some(false);
        assert_eq!(classify(&passive).unwrap(), Classification::Dropped(DropReason::PassiveFill));
        assert!(matches!(
            classify(&rec(0.0, Action::Insert, Side::Bid, 100, (104, 104), q)),
            Err(PipelineError::InconsistentQuotes { .. })
        ));
    }

    #[test]
    fn five_record_book() {
        let recs = vec![
            rec(1.0, Action::Insert, Side::Bid, 100, (100, 104), (100, 104)),
            rec(2.0, Action::Insert, Side::Bid, 102, (100, 104), (102, 104)),
            rec(3.0, Action::Trade, Side::Ask, 104, (102, 104), (102, 106)),
            rec(4.0, Action::Cancel, Side::Bid, 102, (102, 106), (100, 106)),
            rec(5.0, Action::Insert, Side::Ask, 110, (100, 106), (100, 106)),
        ];
        let (s, stats) = classify_records(&recs, "d", Session::new(0.0, 10.0).unwrap()).unwrap();
        let kinds: Vec<(EventType, f64)> = s.events().iter().map(|e| (e.kind, e.delta)).collect();
        assert_eq!(
            kinds,
            vec![
                (EventType::LimitBid, 0.0),
                (EventType::PriceUp, 1.0),
                (EventType::PriceUp, 1.0),
                (EventType::PriceDown, -1.0),
            ]
        );
        assert_eq!(stats.deep_book, 1);
        let mid = |b: i64, a: i64| (b + a) as f64 / 2.0;
        let total: f64 = kinds.iter().map(|k| k.1).sum();
        assert_eq!(total, mid(100, 106) - mid(100, 104));
    }

    #[test]
    fn events_csv_round_trip_and_sorting() {
        let text = "ts_ns,agent_id,event_type,delta_half_ticks\n\
                    30000000000000,2,P+,1\n\
                    29000000000000,1,La,0\n\
                    29000000000000,3,Cb,0\n\
                    1000,1,Lb,0\n";
        let session = Session::new(DEFAULT_SESSION.0, DEFAULT_SESSION.1).unwrap();
        let (s, stats) = read_events_csv(text.as_bytes(), "d", session).unwrap();
        assert_eq!(stats.out_of_session, 1);
        let agents: Vec<u32> = s.events().iter().map(|e| e.agent.0).collect();
        assert_eq!(agents, vec![1, 3, 2]);
        let mut buf = Vec::new();
        write_events_csv(&s, &mut buf).unwrap();
        let (back, _) = read_events_csv(buf.as_slice(), "d", session).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_events_file() {
        let session = Session::new(0.0, 10.0).unwrap();
        let (s, _) = read_events_csv("ts_ns,agent_id,event_type,delta_half_ticks\n".as_bytes(), "d", session).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn schema_errors_carry_rows() {
        let session = Session::new(0.0, 10.0).unwrap();
        let bad_type = "ts_ns,agent_id,event_type,delta_half_ticks\n1,1,La,0\n2,1,XX,0\n";
        assert!(matches!(
            read_events_csv(bad_type.as_bytes(), "d", session),
            Err(PipelineError::SchemaViolation { row: 3, .. })
        ));
        let bad_ts = "ts_ns,agent_id,event_type,delta_half_ticks\nnoon,1,La,0\n";
        assert!(matches!(
            read_events_csv(bad_ts.as_bytes(), "d", session),
            Err(PipelineError::UnparseableTimestamp { row: 2, .. })
        ));
        let missing = "ts_ns,agent_id,delta_half_ticks\n";
        assert!(matches!(
            read_events_csv(missing.as_bytes(), "d", session),
            Err(PipelineError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn raw_csv_parsing() {
        let text = "ts_ns,agent_id,action,side,price_ht,size,order_id,bb_pre,ba_pre,bb_post,ba_post,aggressor\n\
                    2000000000,7,insert,bid,100,3,o1,100,104,100,104,\n\
                    1000000000,7,trade,ask,104,2,,100,104,100,104,1\n";
        let (recs, stats) = read_raw_csv(text.as_bytes(), Session::new(0.0, 10.0).unwrap()).unwrap();
        assert_eq!(stats.rows, 2);
        assert_eq!(recs[0].action, Action::Trade);
        assert_eq!(recs[1].order_id.as_deref(), Some("o1"));
    }

    #[test]
    fn features_examples() {
        let session = Session::new(0.0, 20.0).unwrap();
        let q = (100, 104);
        let mut recs = Vec::new();
        for (i, (t_in, t_out)) in [(1.0, 2.0), (2.0, 4.0), (3.0, 9.0)].iter().enumerate() {
            let mut a = rec(*t_in, Action::Insert, Side::Bid, 100, q, q);
            a.order_id = Some(format!("o{i}"));
            let mut c = rec(*t_out, Action::Cancel, Side::Bid, 100, q, q);
            c.order_id = Some(format!("o{i}"));
            recs.push(a);
            recs.push(c);
        }
        let mut buy = rec(10.0, Action::Trade, Side::Ask, 104, q, q);
        buy.size = 10.0;
        recs.push(buy.clone());
        recs.sort_by(|a, b| a.t.total_cmp(&b.t));
        let (s, _) = classify_records(&recs, "d", session).unwrap();
        let f = compute_features(&recs, &s, AgentId(1), Some(42.0));
        assert_eq!(f.order_lifetime_median, Some(2.0));
        assert_eq!(f.eod_position_ratio, Some(100.0));
        assert_eq!(f.aggressive_volume_fraction, Some(100.0));
        assert_eq!(f.presence_l1, Some(42.0));
        assert_eq!(f.counts.iter().sum::<usize>(), s.len());

        let mut sell = buy.clone();
        sell.side = Side::Bid;
        sell.price = 100;
        sell.t = 11.0;
        recs.push(sell);
        let (s, _) = classify_records(&recs, "d", session).unwrap();
        let f = compute_features(&recs, &s, AgentId(1), None);
        assert_eq!(f.eod_position_ratio, Some(0.0));

        // shuffled input rows give the same features
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(compute_features(&rev, &s, AgentId(1), None), f);

        // no order ids: lifetime absent and flagged
        let anon: Vec<_> = recs.iter().cloned().map(|mut r| {
            r.order_id = None;
            r
        }).collect();
        let g = compute_features(&anon, &s, AgentId(1), None);
        assert!(g.order_lifetime_median.is_none());
        assert!(!g.flags.is_empty());

        let mut buf = Vec::new();
        write_features_csv(&[f.clone(), g.clone()], &mut buf).unwrap();
        let back = read_features_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![f, g]);
    }

    #[test]
    fn shuffle_preserves_counts_and_times() {
        let mut ev = Vec::new();
        for i in 0..100 {
            let agent = AgentId(if i % 4 == 0 { 2 } else { 1 } + (i % 3) as u32);
            ev.push(Event::new(i as f64 * 0.1, agent, EventType::ALL[2 + i % 6], 0.0));
        }
        let s = EventStream::new("d", Session::new(0.0, 20.0).unwrap(), ev).unwrap();
        let a = shuffle_control(&s, 1);
        let b = shuffle_control(&s, 2);
        for agent in s.agents() {
            assert_eq!(a.counts(agent), s.counts(agent));
        }
        let times = |x: &EventStream| x.events().iter().map(|e| (e.t.to_bits(), e.kind)).collect::<Vec<_>>();
        assert_eq!(times(&a), times(&s));
        assert_ne!(a, b);
        assert_eq!(shuffle_control(&s, 1), a);

        let single = EventStream::new(
            "d",
            Session::new(0.0, 5.0).unwrap(),
            (0..4).map(|i| Event::new(i as f64, AgentId(3), EventType::LimitAsk, 0.0)).collect(),
        )
        .unwrap();
        assert_eq!(shuffle_control(&single, 9), single);
    }

    #[test]
    fn deciles() {
        let obs: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64, i as f64)).collect();
        let d = decile_conditional_mean("x", "y", &obs).unwrap();
        for (k, b) in d.bins.iter().enumerate() {
            assert_abs_diff_eq!(b.mean, 10.0 * k as f64 + 5.5, epsilon = 1e-12);
            assert_eq!(b.count, 10);
        }
        let flat: Vec<(f64, f64)> = (0..37).map(|i| (i as f64, 2.0)).collect();
        let d = decile_conditional_mean("x", "y", &flat).unwrap();
        assert!(d.bins.iter().all(|b| b.mean == 2.0 && b.std_error == 0.0));
        assert!(d.bins.iter().all(|b| (b.count as f64 - 3.7).abs() <= 1.0));
        assert!(d.bins.windows(2).all(|w| w[0].upper <= w[1].lower));
        let ind: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64, if i > 50 { 1.0 } else { 0.0 })).collect();
        let d = decile_conditional_mean("x", "y", &ind).unwrap();
        let means: Vec<f64> = d.bins.iter().map(|b| b.mean).collect();
        assert_eq!(means, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            decile_conditional_mean("x", "y", &obs[..9]),
            Err(PipelineError::TooFewObservations { found: 9 })
        ));
    }

    #[test]
    fn presence_table() {
        let text = "day,agent_id,presence_pct\n2024-01-02,1,55.5\n,2,10\n";
        let t = PresenceTable::read(text.as_bytes()).unwrap();
        assert_eq!(t.get("2024-01-02", AgentId(1)), Some(55.5));
        assert_eq!(t.get("2024-01-03", AgentId(1)), None);
        assert_eq!(t.get("anything", AgentId(2)), Some(10.0));
    }
}
