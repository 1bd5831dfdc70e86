use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{corrupt, Result};
use crate::simnet::NodeId;

/// 64-bit object reference: region id in the high half, byte offset in the
/// low half. Ordering is the canonical lock order.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Addr {
    pub region: u32,
    pub offset: u32,
}

impl Addr {
    pub const NULL: Addr = Addr {
        region: u32::MAX,
        offset: u32::MAX,
    };

    pub const fn new(region: u32, offset: u32) -> Self {
        Addr { region, offset }
    }

    pub fn is_null(self) -> bool {
        self == Addr::NULL
    }

    pub fn as_u64(self) -> u64 {
        ((self.region as u64) << 32) | self.offset as u64
    }

    pub fn from_u64(v: u64) -> Self {
        Addr {
            region: (v >> 32) as u32,
            offset: v as u32,
        }
    }

    /// Big-endian, region id first.
    pub fn to_bytes(self) -> [u8; 8] {
        self.as_u64().to_be_bytes()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let arr: [u8; 8] = b
            .get(..8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| corrupt("short address"))?;
        Ok(Addr::from_u64(u64::from_be_bytes(arr)))
    }
}

impl fmt::Debug for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "null")
        } else {
            write!(f, "{}:{}", self.region, self.offset)
        }
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Address plus exact object size, so one read fetches the whole object.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FatRef {
    pub addr: Addr,
    pub size: u32,
}

impl FatRef {
    pub const NULL: FatRef = FatRef {
        addr: Addr::NULL,
        size: 0,
    };
    pub const LEN: usize = 12;

    pub fn new(addr: Addr, size: u32) -> Self {
        FatRef { addr, size }
    }

    pub fn is_null(self) -> bool {
        self.addr.is_null()
    }

    pub fn to_bytes(self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..8].copy_from_slice(&self.addr.to_bytes());
        out[8..].copy_from_slice(&self.size.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 12 {
            return Err(corrupt("short fat reference"));
        }
        let addr = Addr::from_bytes(&b[..8])?;
        let size = u32::from_be_bytes(b[8..12].try_into().unwrap());
        Ok(FatRef { addr, size })
    }
}

/// Global commit/snapshot timestamp.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Placement hint for allocation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Hint {
    /// A region whose primary is the invoking node.
    Local,
    /// The region holding the given object, falling back to its node.
    Near(Addr),
    /// A region whose primary is the given node.
    On(NodeId),
}
