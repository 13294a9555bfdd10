//! The `.tskb` knowledge-base file.
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 4                | magic `TSKB`                                    |
//! | 2                | format version, `u16` LE (currently 1)          |
//! | 4                | `n_kb`, `u32` LE                                |
//! | 4                | `sl`, `u32` LE                                  |
//! | 4 · n_kb · sl    | entry values, row-major `f32` LE                |
//! | 4                | metadata length `m`, `u32` LE                   |
//! | m                | UTF-8 JSON metadata                             |
//! | 8                | CRC-64/XZ of every preceding byte, `u64` LE     |
//!
//! The metadata object holds `manifest_digest`, one
//! `{domain, dataset_id, channel_id, start}` record per entry in row order,
//! and the producing run's `artifact` envelope (or `null`).

use std::fs;
use std::path::Path;

use rafcast_core::kbase::{KbEntry, KnowledgeBase};
use serde::{Deserialize, Serialize};

use crate::artifact::Envelope;
use crate::container::{Reader, Writer};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"TSKB";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    domain: String,
    dataset_id: String,
    channel_id: String,
    start: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    manifest_digest: u64,
    entries: Vec<EntryMeta>,
    artifact: Option<Envelope>,
}

pub fn encode(kb: &KnowledgeBase, artifact: Option<&Envelope>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(kb.len() as u32);
    w.u32(kb.sl() as u32);
    for e in kb.entries() {
        for &v in &e.values {
            w.f32(v as f32);
        }
    }
    let meta = Meta {
        manifest_digest: kb.manifest_digest(),
        entries: kb
            .entries()
            .iter()
            .map(|e| EntryMeta {
                domain: e.domain.clone(),
                dataset_id: e.dataset_id.clone(),
                channel_id: e.channel_id.clone(),
                start: e.start,
            })
            .collect(),
        artifact: artifact.cloned(),
    };
    w.block(&serde_json::to_vec(&meta).expect("metadata serializes"));
    w.finish()
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(KnowledgeBase, Option<Envelope>), FormatError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let sl = r.u32()? as usize;
    let count = n as u64 * sl as u64;
    r.require(count * 4 + 4)?;
    let values = r.f32s(n * sl)?;
    let meta = r.block()?;
    r.finish()?;
    let meta: Meta = serde_json::from_slice(meta).map_err(|e| FormatError::Metadata(e.to_string()))?;
    if meta.entries.len() != n {
        return Err(FormatError::Metadata(format!(
            "{} entry records for {n} value rows",
            meta.entries.len()
        )));
    }
    let entries = meta
        .entries
        .into_iter()
        .enumerate()
        .map(|(i, m)| KbEntry {
            values: values[i * sl..(i + 1) * sl].iter().map(|&v| v as f64).collect(),
            domain: m.domain,
            dataset_id: m.dataset_id,
            channel_id: m.channel_id,
            start: m.start,
        })
        .collect();
    let kb = KnowledgeBase::from_entries(sl, entries, meta.manifest_digest)
        .map_err(|e| FormatError::Metadata(e.to_string()))?;
    Ok((kb, meta.artifact))
}

pub fn save(path: &Path, kb: &KnowledgeBase, artifact: Option<&Envelope>) -> Result<()> {
    fs::write(path, encode(kb, artifact)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(KnowledgeBase, Option<Envelope>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rafcast_core::tsdata::Series;

    fn kb(per_domain: usize) -> KnowledgeBase {
        let series: Vec<Series> = ["x", "y", "z"]
            .iter()
            .flat_map(|d| {
                (0..2).map(move |i| Series {
                    values: (0..16 * 60).map(|t| ((t * 37 + i * 11) % 101) as f64 * 0.173 - 5.0).collect(),
                    channel_id: "v".into(),
                    dataset_id: format!("{d}{i}"),
                    domain: d.to_string(),
                    frequency: "h".into(),
                })
            })
            .collect();
        KnowledgeBase::build(&series, 16, per_domain, 4).unwrap()
    }

    #[test]
    fn round_trip_300_entries() {
        let kb = kb(100);
        assert_eq!(kb.len(), 300);
        let env = Envelope::new("build-kb", 4, &serde_json::json!({"quota": 100}));
        let bytes = encode(&kb, Some(&env));
        let (back, meta) = decode(&bytes).unwrap();
        assert_eq!(back, kb);
        assert_eq!(meta, Some(env.clone()));
        assert_eq!(encode(&back, Some(&env)), bytes);
    }

    #[test]
    fn empty_kb_round_trips() {
        let kb = KnowledgeBase::from_entries(8, Vec::new(), 0).unwrap();
        let (back, meta) = decode(&encode(&kb, None)).unwrap();
        assert_eq!((back.len(), back.sl(), meta), (0, 8, None));
    }

    #[test]
    fn header_layout() {
        let kb = kb(1);
        let bytes = encode(&kb, None);
        assert_eq!(&bytes[..4], b"TSKB");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 16);
        let first = f32::from_le_bytes(bytes[14..18].try_into().unwrap());
        assert_eq!(first as f64, kb.entry(0).values[0]);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode(&kb(5), None);
        for cut in [1, 9, bytes.len() - 20] {
            assert!(
                matches!(decode(&bytes[..bytes.len() - cut]), Err(FormatError::Truncated { .. })),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(FormatError::ChecksumMismatch { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(FormatError::BadMagic { .. })));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(decode(&version), Err(FormatError::UnsupportedVersion { found: 2, .. })));
    }
}
