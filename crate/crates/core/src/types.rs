//! Labels shared by every stage: agents, the eight level-I order types and
//! the (agent, type) component pairs that index the Hawkes model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Market participant identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl AgentId {
    /// Label used for the aggregated "rest of the market" pseudo-agent.
    pub const REST: AgentId = AgentId(u32::MAX);

    pub fn is_rest(self) -> bool {
        self == Self::REST
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_rest() {
            write!(f, "rest")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Level-I event types. The discriminant is the canonical index used in every
/// per-type array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    /// Order that moves the mid-price up.
    #[serde(rename = "P+")]
    PriceUp = 0,
    /// Order that moves the mid-price down.
    #[serde(rename = "P-")]
    PriceDown = 1,
    /// Aggressive order at the best ask that leaves the mid unchanged.
    #[serde(rename = "Ta")]
    TradeAsk = 2,
    /// Aggressive order at the best bid that leaves the mid unchanged.
    #[serde(rename = "Tb")]
    TradeBid = 3,
    #[serde(rename = "La")]
    LimitAsk = 4,
    #[serde(rename = "Lb")]
    LimitBid = 5,
    /// Cancellation at the best ask that does not empty the queue.
    #[serde(rename = "Ca")]
    CancelAsk = 6,
    #[serde(rename = "Cb")]
    CancelBid = 7,
}

/// Number of level-I event types.
pub const N_TYPES: usize = 8;

impl EventType {
    pub const ALL: [EventType; N_TYPES] = [
        EventType::PriceUp,
        EventType::PriceDown,
        EventType::TradeAsk,
        EventType::TradeBid,
        EventType::LimitAsk,
        EventType::LimitBid,
        EventType::CancelAsk,
        EventType::CancelBid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            EventType::PriceUp => "P+",
            EventType::PriceDown => "P-",
            EventType::TradeAsk => "Ta",
            EventType::TradeBid => "Tb",
            EventType::LimitAsk => "La",
            EventType::LimitBid => "Lb",
            EventType::CancelAsk => "Ca",
            EventType::CancelBid => "Cb",
        }
    }

    pub fn is_price_move(self) -> bool {
        matches!(self, EventType::PriceUp | EventType::PriceDown)
    }

    /// Bid/ask and up/down merged family.
    pub fn family(self) -> TypeFamily {
        match self {
            EventType::PriceUp | EventType::PriceDown => TypeFamily::Price,
            EventType::TradeAsk | EventType::TradeBid => TypeFamily::Trade,
            EventType::LimitAsk | EventType::LimitBid => TypeFamily::Limit,
            EventType::CancelAsk | EventType::CancelBid => TypeFamily::Cancel,
        }
    }

    /// Whether `delta` carries the sign this type requires.
    pub fn delta_consistent(self, delta: f64) -> bool {
        match self {
            EventType::PriceUp => delta > 0.0,
            EventType::PriceDown => delta < 0.0,
            _ => delta == 0.0,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownEventType(pub String);

impl fmt::Display for UnknownEventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown event type {:?}", self.0)
    }
}

impl std::error::Error for UnknownEventType {}

impl FromStr for EventType {
    type Err = UnknownEventType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .iter()
            .copied()
            .find(|t| t.code() == s.trim())
            .ok_or_else(|| UnknownEventType(s.to_string()))
    }
}

/// Merged type families used for reporting (bid/ask and up/down collapsed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeFamily {
    #[serde(rename = "P")]
    Price,
    #[serde(rename = "T")]
    Trade,
    #[serde(rename = "L")]
    Limit,
    #[serde(rename = "C")]
    Cancel,
}

impl TypeFamily {
    pub const ALL: [TypeFamily; 4] = [
        TypeFamily::Price,
        TypeFamily::Trade,
        TypeFamily::Limit,
        TypeFamily::Cancel,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TypeFamily::Price => "P",
            TypeFamily::Trade => "T",
            TypeFamily::Limit => "L",
            TypeFamily::Cancel => "C",
        }
    }
}

/// One dimension of the Hawkes model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Component {
    pub agent: AgentId,
    #[serde(rename = "type")]
    pub kind: EventType,
}

impl Component {
    pub fn new(agent: AgentId, kind: EventType) -> Self {
        Self { agent, kind }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.agent, self.kind)
    }
}

/// Agent-major component list: eight components per agent in canonical type order.
pub fn agent_components(agents: &[AgentId]) -> Vec<Component> {
    agents
        .iter()
        .flat_map(|&a| EventType::ALL.iter().map(move |&t| Component::new(a, t)))
        .collect()
}
