//! On-store layout of vertices and edges.
//!
//! A vertex is a fixed-size header object whose address is the vertex's
//! identity, plus a data object holding the encoded record:
//!
//! ```text
//! header: [type_id:4][data FatRef:12][out EdgeListRef:17][in EdgeListRef:17]
//! EdgeListRef: [mode:1][inline FatRef:12][count:4]
//! data:   [len:4][record]
//! inline edge list: [count:4] then 24-byte half-edges [type_id:4][peer:8][data FatRef:12]
//! ```

use crate::error::{corrupt, Result};
use crate::store::{Addr, FatRef, MIN_OBJECT};

pub const HEADER_SIZE: usize = MIN_OBJECT;
pub const HALF_EDGE_LEN: usize = 24;
pub const INITIAL_EDGE_CAPACITY: usize = 8;
pub const SPILL_THRESHOLD: usize = 1024;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    pub fn byte(self) -> u8 {
        match self {
            Direction::Out => 0,
            Direction::In => 1,
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::Out => Direction::In,
            Direction::In => Direction::Out,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ListMode {
    Inline,
    Tree,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EdgeListRef {
    pub mode: ListMode,
    pub inline: FatRef,
    pub count: u32,
}

impl EdgeListRef {
    pub const LEN: usize = 17;
    pub const EMPTY: EdgeListRef = EdgeListRef {
        mode: ListMode::Inline,
        inline: FatRef::NULL,
        count: 0,
    };

    fn write(&self, out: &mut [u8]) {
        out[0] = match self.mode {
            ListMode::Inline => 0,
            ListMode::Tree => 1,
        };
        out[1..13].copy_from_slice(&self.inline.to_bytes());
        out[13..17].copy_from_slice(&self.count.to_be_bytes());
    }

    fn read(b: &[u8]) -> Result<EdgeListRef> {
        let mode = match b[0] {
            0 => ListMode::Inline,
            1 => ListMode::Tree,
            m => return Err(corrupt(format!("bad edge list mode {m}"))),
        };
        Ok(EdgeListRef {
            mode,
            inline: FatRef::from_bytes(&b[1..13])?,
            count: u32::from_be_bytes(b[13..17].try_into().unwrap()),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VertexHeader {
    pub type_id: u32,
    pub data: FatRef,
    pub out_edges: EdgeListRef,
    pub in_edges: EdgeListRef,
}

impl VertexHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_SIZE];
        out[0..4].copy_from_slice(&self.type_id.to_be_bytes());
        out[4..16].copy_from_slice(&self.data.to_bytes());
        self.out_edges.write(&mut out[16..33]);
        self.in_edges.write(&mut out[33..50]);
        out
    }

    pub fn decode(b: &[u8]) -> Result<VertexHeader> {
        if b.len() < 50 {
            return Err(corrupt("short vertex header"));
        }
        Ok(VertexHeader {
            type_id: u32::from_be_bytes(b[0..4].try_into().unwrap()),
            data: FatRef::from_bytes(&b[4..16])?,
            out_edges: EdgeListRef::read(&b[16..33])?,
            in_edges: EdgeListRef::read(&b[33..50])?,
        })
    }

    pub fn edges(&self, dir: Direction) -> &EdgeListRef {
        match dir {
            Direction::Out => &self.out_edges,
            Direction::In => &self.in_edges,
        }
    }

    pub fn edges_mut(&mut self, dir: Direction) -> &mut EdgeListRef {
        match dir {
            Direction::Out => &mut self.out_edges,
            Direction::In => &mut self.in_edges,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HalfEdge {
    pub type_id: u32,
    pub peer: Addr,
    pub data: FatRef,
}

impl HalfEdge {
    pub fn encode_into(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&self.type_id.to_be_bytes());
        out[4..12].copy_from_slice(&self.peer.to_bytes());
        out[12..24].copy_from_slice(&self.data.to_bytes());
    }

    pub fn decode(b: &[u8]) -> Result<HalfEdge> {
        Ok(HalfEdge {
            type_id: u32::from_be_bytes(b[0..4].try_into().unwrap()),
            peer: Addr::from_bytes(&b[4..12])?,
            data: FatRef::from_bytes(&b[12..24])?,
        })
    }
}

/// Object size for an inline list holding `capacity` half-edges.
pub fn list_size(capacity: usize) -> usize {
    (4 + capacity * HALF_EDGE_LEN).max(MIN_OBJECT)
}

pub fn list_capacity(size: u32) -> usize {
    (size as usize - 4) / HALF_EDGE_LEN
}

pub fn encode_list(edges: &[HalfEdge], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    out[0..4].copy_from_slice(&(edges.len() as u32).to_be_bytes());
    for (i, e) in edges.iter().enumerate() {
        let at = 4 + i * HALF_EDGE_LEN;
        e.encode_into(&mut out[at..at + HALF_EDGE_LEN]);
    }
    out
}

pub fn decode_list(b: &[u8]) -> Result<Vec<HalfEdge>> {
    if b.len() < 4 {
        return Err(corrupt("short edge list"));
    }
    let n = u32::from_be_bytes(b[0..4].try_into().unwrap()) as usize;
    if 4 + n * HALF_EDGE_LEN > b.len() {
        return Err(corrupt("edge list count exceeds object"));
    }
    (0..n)
        .map(|i| HalfEdge::decode(&b[4 + i * HALF_EDGE_LEN..4 + (i + 1) * HALF_EDGE_LEN]))
        .collect()
}

/// `[len:4][payload]`, padded to at least the minimum object size.
pub fn encode_blob(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity((payload.len() + 4).max(MIN_OBJECT));
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.resize(out.len().max(MIN_OBJECT), 0);
    out
}

pub fn decode_blob(b: &[u8]) -> Result<&[u8]> {
    if b.len() < 4 {
        return Err(corrupt("short data object"));
    }
    let n = u32::from_be_bytes(b[0..4].try_into().unwrap()) as usize;
    b.get(4..4 + n).ok_or_else(|| corrupt("truncated data object"))
}

/// Edge-tree key: `[dir:1][owner:8][type:4][peer:8]`.
pub fn edge_tree_key(dir: Direction, owner: Addr, type_id: u32, peer: Addr) -> Vec<u8> {
    let mut k = Vec::with_capacity(21);
    k.push(dir.byte());
    k.extend_from_slice(&owner.to_bytes());
    k.extend_from_slice(&type_id.to_be_bytes());
    k.extend_from_slice(&peer.to_bytes());
    k
}

pub fn edge_tree_prefix(dir: Direction, owner: Addr, type_id: Option<u32>) -> Vec<u8> {
    let mut k = Vec::with_capacity(13);
    k.push(dir.byte());
    k.extend_from_slice(&owner.to_bytes());
    if let Some(t) = type_id {
        k.extend_from_slice(&t.to_be_bytes());
    }
    k
}

pub fn decode_edge_tree_entry(key: &[u8], val: &[u8]) -> Result<HalfEdge> {
    if key.len() != 21 || val.len() < FatRef::LEN {
        return Err(corrupt("bad edge tree entry"));
    }
    Ok(HalfEdge {
        type_id: u32::from_be_bytes(key[9..13].try_into().unwrap()),
        peer: Addr::from_bytes(&key[13..21])?,
        data: FatRef::from_bytes(val)?,
    })
}
