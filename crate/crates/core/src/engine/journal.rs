//! Journal and snapshot persistence, plus digest-verified replay.
//!
//! Journal file layout (all integers little-endian):
//!
//! ```text
//! "GEMJ" | u32 version | u32 len | header JSON | { u32 len | entry JSON }*
//! ```
//!
//! Snapshot file layout:
//!
//! ```text
//! "GEMS" | u32 version | u64 len | body JSON | 32-byte state digest
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::delta;
use super::{Outcome, TransitionRecord};
use crate::baseline::CrudStore;
use crate::config::Settings;
use crate::policy;
use crate::state::{Digest, MemoryState, Timestamp};

pub const JOURNAL_MAGIC: &[u8; 4] = b"GEMJ";
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"GEMS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Gem,
    CrudBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub system: System,
    pub settings: Settings,
    pub genesis: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub record: TransitionRecord,
    pub digest_after: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Journal {
    pub header: JournalHeader,
    pub entries: Vec<JournalEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a journal or snapshot: {0}")]
    Format(String),
    #[error("corrupt journal at tick {tick}: {detail}")]
    Corrupt { tick: u64, detail: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

impl Journal {
    pub fn new(system: System, settings: Settings, genesis: Digest) -> Self {
        Self { header: JournalHeader { system, settings, genesis }, entries: Vec::new() }
    }

    pub fn push(&mut self, record: TransitionRecord, digest_after: Digest) {
        self.entries.push(JournalEntry { record, digest_after });
    }

    pub fn committed(&self) -> impl Iterator<Item = &JournalEntry> {
        self.entries.iter().filter(|e| e.record.outcome.is_committed())
    }

    /// Digest of the last committed state (genesis for an empty journal).
    pub fn head_digest(&self) -> Digest {
        self.committed().last().map(|e| e.digest_after).unwrap_or(self.header.genesis)
    }

    /// The first `n` entries as a journal of their own.
    pub fn prefix(&self, n: usize) -> Journal {
        Journal { header: self.header.clone(), entries: self.entries[..n.min(self.entries.len())].to_vec() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(JOURNAL_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_frame(w, &serde_json::to_vec(&self.header).expect("header serializes"))?;
        for e in &self.entries {
            write_frame(w, &serde_json::to_vec(e).expect("entry serializes"))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, JournalError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, JournalError> {
        if bytes.len() < 8 || &bytes[..4] != JOURNAL_MAGIC {
            return Err(JournalError::Format("missing GEMJ magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(JournalError::Format(format!("unsupported version {version}")));
        }
        let mut pos = 8;
        let header_bytes = read_frame(bytes, &mut pos).ok_or_else(|| JournalError::Corrupt {
            tick: 0,
            detail: "truncated header".into(),
        })?;
        let header: JournalHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| JournalError::Corrupt { tick: 0, detail: format!("header: {e}") })?;
        let mut entries: Vec<JournalEntry> = Vec::new();
        while pos < bytes.len() {
            let last = entries.last().map_or(0, |e: &JournalEntry| e.record.tick.tick);
            let frame = read_frame(bytes, &mut pos).ok_or_else(|| JournalError::Corrupt {
                tick: last + 1,
                detail: format!("record truncated after tick {last}"),
            })?;
            let entry = serde_json::from_slice(frame)
                .map_err(|e| JournalError::Corrupt { tick: last + 1, detail: format!("undecodable record: {e}") })?;
            entries.push(entry);
        }
        Ok(Journal { header, entries })
    }
}

fn write_frame(w: &mut impl Write, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| std::io::Error::other("frame exceeds 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)
}

fn read_frame<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    let len_bytes = bytes.get(*pos..*pos + 4)?;
    let len = u32::from_le_bytes(len_bytes.try_into().ok()?) as usize;
    let body = bytes.get(*pos + 4..*pos + 4 + len)?;
    *pos += 4 + len;
    Some(body)
}

/// Genesis state of a GEM journal.
pub fn gem_genesis(header: &JournalHeader) -> Result<MemoryState, JournalError> {
    let policies = header
        .settings
        .policies()
        .map_err(|e| JournalError::Corrupt { tick: 0, detail: format!("policies in header: {e}") })?;
    let state = MemoryState::genesis(policies);
    if state.digest() != header.genesis {
        return Err(JournalError::Corrupt { tick: 0, detail: "genesis digest mismatch".into() });
    }
    Ok(state)
}

/// Applies one journal entry to a GEM state and checks its digest.
pub fn replay_step(state: &mut MemoryState, entry: &JournalEntry) -> Result<(), JournalError> {
    let tick = entry.record.tick.tick;
    if entry.record.outcome == Outcome::Committed {
        if tick != state.clock.tick + 1 {
            return Err(JournalError::Corrupt { tick, detail: format!("expected tick {}", state.clock.tick + 1) });
        }
        delta::apply_all(state, &entry.record.deltas).map_err(|e| JournalError::Corrupt { tick, detail: e.0 })?;
        state.clock = Timestamp::at(tick);
    }
    if state.digest() != entry.digest_after {
        return Err(JournalError::Corrupt { tick, detail: "state digest differs from the recorded digest".into() });
    }
    Ok(())
}

/// Rebuilds the final state of a GEM journal, verifying every digest.
pub fn replay(journal: &Journal) -> Result<MemoryState, JournalError> {
    if journal.header.system != System::Gem {
        return Err(JournalError::Format("not a GEM journal".into()));
    }
    let mut state = gem_genesis(&journal.header)?;
    for e in &journal.entries {
        replay_step(&mut state, e)?;
    }
    Ok(state)
}

/// Either system's state, as stored in a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotBody {
    Gem(MemoryState),
    CrudBaseline(CrudStore),
}

impl SnapshotBody {
    pub fn digest(&self) -> Digest {
        match self {
            SnapshotBody::Gem(s) => s.digest(),
            SnapshotBody::CrudBaseline(s) => s.digest(),
        }
    }

    fn refresh(&mut self) {
        match self {
            SnapshotBody::Gem(s) => s.refresh_embeddings(),
            SnapshotBody::CrudBaseline(s) => s.refresh_embeddings(),
        }
    }

    /// Replays `journal` to its final state.
    pub fn from_journal(journal: &Journal) -> Result<Self, JournalError> {
        Ok(match journal.header.system {
            System::Gem => SnapshotBody::Gem(replay(journal)?),
            System::CrudBaseline => SnapshotBody::CrudBaseline(crate::baseline::replay(journal)?),
        })
    }
}

pub fn write_snapshot(body: &SnapshotBody) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("snapshot serializes");
    let mut out = Vec::with_capacity(json.len() + 48);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body.digest().0);
    out
}

pub fn read_snapshot(bytes: &[u8]) -> Result<SnapshotBody, JournalError> {
    if bytes.len() < 16 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(JournalError::Format("missing GEMS magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(JournalError::Format(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|e| e + 32 == bytes.len());
    let Some(end) = end else {
        return Err(JournalError::CorruptSnapshot(format!("expected {} bytes, found {}", 16 + len + 32, bytes.len())));
    };
    let mut body: SnapshotBody =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| JournalError::CorruptSnapshot(e.to_string()))?;
    body.refresh();
    let stored = Digest(bytes[end..].try_into().expect("32 bytes"));
    if body.digest() != stored {
        return Err(JournalError::CorruptSnapshot("digest mismatch".into()));
    }
    Ok(body)
}

/// Default-policy settings header digest, used by tests that build journals by hand.
pub fn default_genesis_digest() -> Digest {
    MemoryState::genesis(policy::default_policy_set()).digest()
}
