//! Order-preserving key encoding.
//!
//! Every component starts with a type tag so keys of mixed types still sort
//! deterministically. Integers are big-endian with the sign bit flipped,
//! floats use the usual total-order bit transform, and strings and blobs are
//! escaped (`00` becomes `00 ff`) and terminated by `00 01`, which keeps the
//! encoding prefix-free: a string never sorts between another string and its
//! extensions.

use crate::error::{corrupt, Result};
use crate::store::Addr;

const TAG_FALSE: u8 = 0x02;
const TAG_TRUE: u8 = 0x03;
const TAG_INT: u8 = 0x10;
const TAG_FLOAT: u8 = 0x11;
const TAG_DATE: u8 = 0x12;
const TAG_STR: u8 = 0x20;
const TAG_BYTES: u8 = 0x21;

/// One decoded key component.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyPart {
    Bool(bool),
    Int(i64),
    Float(f64),
    /// Days since the Unix epoch.
    Date(i32),
    Str(String),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyBuf(Vec<u8>);

impl KeyBuf {
    pub fn new() -> Self {
        KeyBuf(Vec::new())
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn bool(mut self, v: bool) -> Self {
        self.0.push(if v { TAG_TRUE } else { TAG_FALSE });
        self
    }

    pub fn int(mut self, v: i64) -> Self {
        self.0.push(TAG_INT);
        self.0.extend_from_slice(&((v as u64) ^ (1 << 63)).to_be_bytes());
        self
    }

    pub fn float(mut self, v: f64) -> Self {
        let bits = v.to_bits();
        let ordered = if bits >> 63 == 1 { !bits } else { bits | (1 << 63) };
        self.0.push(TAG_FLOAT);
        self.0.extend_from_slice(&ordered.to_be_bytes());
        self
    }

    pub fn date(mut self, days: i32) -> Self {
        self.0.push(TAG_DATE);
        self.0.extend_from_slice(&((days as u32) ^ (1 << 31)).to_be_bytes());
        self
    }

    pub fn str(self, v: &str) -> Self {
        self.escaped(TAG_STR, v.as_bytes())
    }

    pub fn bytes(self, v: &[u8]) -> Self {
        self.escaped(TAG_BYTES, v)
    }

    fn escaped(mut self, tag: u8, v: &[u8]) -> Self {
        self.0.push(tag);
        for &b in v {
            self.0.push(b);
            if b == 0 {
                self.0.push(0xff);
            }
        }
        self.0.extend_from_slice(&[0, 1]);
        self
    }

    pub fn part(self, p: &KeyPart) -> Self {
        match p {
            KeyPart::Bool(b) => self.bool(*b),
            KeyPart::Int(i) => self.int(*i),
            KeyPart::Float(f) => self.float(*f),
            KeyPart::Date(d) => self.date(*d),
            KeyPart::Str(s) => self.str(s),
            KeyPart::Bytes(b) => self.bytes(b),
        }
    }

    /// Untagged fixed-width fields for internal keys (queue, edge tree).
    pub fn raw_u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }

    pub fn raw_u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw_u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn addr(mut self, a: Addr) -> Self {
        self.0.extend_from_slice(&a.to_bytes());
        self
    }
}

/// Decodes one tagged component from the front of `buf`, returning it and
/// the remaining bytes.
pub fn decode_part(buf: &[u8]) -> Result<(KeyPart, &[u8])> {
    let (&tag, rest) = buf.split_first().ok_or_else(|| corrupt("empty key"))?;
    let fixed = |n: usize| -> Result<(&[u8], &[u8])> {
        if rest.len() < n {
            Err(corrupt("short key component"))
        } else {
            Ok(rest.split_at(n))
        }
    };
    match tag {
        TAG_FALSE => Ok((KeyPart::Bool(false), rest)),
        TAG_TRUE => Ok((KeyPart::Bool(true), rest)),
        TAG_INT => {
            let (b, rest) = fixed(8)?;
            let v = u64::from_be_bytes(b.try_into().unwrap()) ^ (1 << 63);
            Ok((KeyPart::Int(v as i64), rest))
        }
        TAG_FLOAT => {
            let (b, rest) = fixed(8)?;
            let o = u64::from_be_bytes(b.try_into().unwrap());
            let bits = if o >> 63 == 1 { o & !(1 << 63) } else { !o };
            Ok((KeyPart::Float(f64::from_bits(bits)), rest))
        }
        TAG_DATE => {
            let (b, rest) = fixed(4)?;
            let v = u32::from_be_bytes(b.try_into().unwrap()) ^ (1 << 31);
            Ok((KeyPart::Date(v as i32), rest))
        }
        TAG_STR | TAG_BYTES => {
            let mut out = Vec::new();
            let mut i = 0;
            loop {
                match (rest.get(i), rest.get(i + 1)) {
                    (Some(0), Some(1)) => break,
                    (Some(0), Some(0xff)) => {
                        out.push(0);
                        i += 2;
                    }
                    (Some(&b), _) if b != 0 => {
                        out.push(b);
                        i += 1;
                    }
                    _ => return Err(corrupt("bad escaped key component")),
                }
            }
            let rest = &rest[i + 2..];
            if tag == TAG_STR {
                let s = String::from_utf8(out).map_err(|_| corrupt("key string not utf-8"))?;
                Ok((KeyPart::Str(s), rest))
            } else {
                Ok((KeyPart::Bytes(out), rest))
            }
        }
        _ => Err(corrupt(format!("unknown key tag {tag:#x}"))),
    }
}

/// Smallest key strictly greater than every key starting with `prefix`,
/// or `None` when no such key exists.
pub fn prefix_end(prefix: &[u8]) -> Option<Vec<u8>> {
    let mut end = prefix.to_vec();
    while let Some(last) = end.pop() {
        if last != 0xff {
            end.push(last + 1);
            return Some(end);
        }
    }
    None
}
