//! Append-only, hash-chained bulletin board serialized as JSON lines.
//!
//! Line 1 is the header, then one line per entry, then a footer naming the
//! head hash. Each entry hash is `SHA256(prev || json({seq, type, body}))`
//! with `prev` given as hex text; the first entry chains to the hash of the
//! header line.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::AuditReport;
use crate::group::GroupParams;
use crate::mixnet::to_hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoardError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header")]
    MissingHeader,
    #[error("missing footer")]
    MissingFooter,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("entry {0} breaks the hash chain")]
    BrokenChain(u64),
    #[error("footer does not match the chain head")]
    FooterMismatch,
    #[error("entry {seq} of type {kind} has a malformed body: {message}")]
    Body { seq: u64, kind: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    #[serde(rename = "type")]
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    pub params: GroupParams,
}

impl Header {
    pub fn new(config_hash: String, params: GroupParams) -> Self {
        Self { kind: "header".into(), version: FORMAT_VERSION, config_hash, params }
    }

    fn line(&self) -> String {
        serde_json::to_string(self).expect("header serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub body: Value,
    pub prev: String,
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    seq: u64,
    #[serde(rename = "type")]
    kind: &'a str,
    body: &'a Value,
}

fn entry_hash(prev: &str, seq: u64, kind: &str, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prev.as_bytes());
    hasher.update(serde_json::to_vec(&Hashed { seq, kind, body }).expect("entry serializes"));
    to_hex(&hasher.finalize())
}

impl Entry {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, BoardError> {
        serde_json::from_value(self.body.clone()).map_err(|e| BoardError::Body {
            seq: self.seq,
            kind: self.kind.clone(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    #[serde(rename = "type")]
    pub kind: String,
    pub head: String,
    pub entries: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<AuditReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Board {
    pub header: Header,
    pub entries: Vec<Entry>,
    pub report: Option<AuditReport>,
}

impl Board {
    pub fn new(header: Header) -> Self {
        Self { header, entries: Vec::new(), report: None }
    }

    pub fn genesis(&self) -> String {
        to_hex(&Sha256::digest(self.header.line().as_bytes()))
    }

    pub fn head(&self) -> String {
        self.entries.last().map_or_else(|| self.genesis(), |e| e.hash.clone())
    }

    pub fn append<T: Serialize>(&mut self, kind: &str, body: &T) -> &Entry {
        let body = serde_json::to_value(body).expect("bodies serialize");
        let seq = self.entries.len() as u64;
        let prev = self.head();
        let hash = entry_hash(&prev, seq, kind, &body);
        self.entries.push(Entry { seq, kind: kind.into(), body, prev, hash });
        self.entries.last().expect("just pushed")
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn verify_chain(&self) -> Result<(), BoardError> {
        let mut prev = self.genesis();
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq != i as u64 || e.prev != prev || entry_hash(&prev, e.seq, &e.kind, &e.body) != e.hash {
                return Err(BoardError::BrokenChain(i as u64));
            }
            prev = e.hash.clone();
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = self.header.line();
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        let footer = Footer { kind: "footer".into(), head: self.head(), entries: self.entries.len() as u64, report: self.report.clone() };
        out.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
        out.push('\n');
        out
    }

    /// Parses and checks the chain and footer.
    pub fn parse(text: &str) -> Result<Self, BoardError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(BoardError::MissingHeader)?;
        let header: Header = serde_json::from_str(first).map_err(|e| BoardError::Parse { line: 1, message: e.to_string() })?;
        if header.kind != "header" {
            return Err(BoardError::MissingHeader);
        }
        if header.version != FORMAT_VERSION {
            return Err(BoardError::Version(header.version));
        }
        let mut board = Board::new(header);
        let mut footer = None;
        for (i, line) in lines {
            if footer.is_some() {
                return Err(BoardError::Parse { line: i + 1, message: "content after footer".into() });
            }
            let value: Value = serde_json::from_str(line).map_err(|e| BoardError::Parse { line: i + 1, message: e.to_string() })?;
            if value.get("type").and_then(Value::as_str) == Some("footer") {
                footer =
                    Some(serde_json::from_value::<Footer>(value).map_err(|e| BoardError::Parse { line: i + 1, message: e.to_string() })?);
            } else {
                board.entries.push(serde_json::from_value(value).map_err(|e| BoardError::Parse { line: i + 1, message: e.to_string() })?);
            }
        }
        let footer = footer.ok_or(BoardError::MissingFooter)?;
        board.verify_chain()?;
        if footer.head != board.head() || footer.entries != board.entries.len() as u64 {
            return Err(BoardError::FooterMismatch);
        }
        board.report = footer.report;
        Ok(board)
    }
}

pub fn config_hash(text: &str) -> String {
    to_hex(&Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn board() -> Board {
        let mut b = Board::new(Header::new(config_hash("cfg"), GroupParams::toy(5)));
        b.append("note", &serde_json::json!({"x": "1f", "list": [1, 2]}));
        b.append("note", &serde_json::json!({"y": null}));
        b
    }

    #[test]
    fn round_trip() {
        let b = board();
        let text = b.to_jsonl();
        let parsed = Board::parse(&text).unwrap();
        assert_eq!(parsed, b);
        assert_eq!(parsed.to_jsonl(), text);
        assert_eq!(b.entries[0].prev, b.genesis());
    }

    #[test]
    fn tamper_is_detected() {
        let text = board().to_jsonl();
        let tampered = text.replace("\"1f\"", "\"2f\"");
        assert_eq!(Board::parse(&tampered), Err(BoardError::BrokenChain(0)));
        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() - 1].join("\n");
        assert_eq!(Board::parse(&truncated), Err(BoardError::MissingFooter));
        let dropped = [lines[0], lines[2], lines[3]].join("\n");
        assert!(Board::parse(&dropped).is_err());
        assert_eq!(Board::parse(""), Err(BoardError::MissingHeader));
        assert!(matches!(Board::parse("{not json"), Err(BoardError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_board_round_trips() {
        let b = Board::new(Header::new(config_hash(""), GroupParams::toy(1)));
        assert_eq!(Board::parse(&b.to_jsonl()).unwrap(), b);
    }

    proptest! {
        #[test]
        fn any_body_edit_breaks_the_chain(values in proptest::collection::vec(0u64..1000, 1..6), pick in 0usize..6, delta in 1u64..50) {
            let mut b = Board::new(Header::new(config_hash("cfg"), GroupParams::toy(5)));
            for v in &values {
                b.append("note", &serde_json::json!({ "v": v }));
            }
            prop_assert_eq!(Board::parse(&b.to_jsonl()).unwrap(), b.clone());
            let i = pick % values.len();
            b.entries[i].body = serde_json::json!({ "v": values[i] + delta });
            prop_assert!(matches!(b.verify_chain(), Err(BoardError::BrokenChain(j)) if j == i as u64));
        }
    }
}
