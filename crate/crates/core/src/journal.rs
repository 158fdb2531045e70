//! Line-oriented append-only journal shared by the key store and the peer pollers.
//!
//! ```text
//! LOCAL|<hex key>|<valid_day>|<comma regions>|<testing region>|<stored_at>
//! REMOTE|<hex key>|<valid_day>|<source>|<stored_at>
//! PEER|<region>|<last_batch_id>|<next_poll or empty>
//! ```

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{DiagnosisKey, RegionId, Timestamp};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io: {0}")]
    Io(#[from] io::Error),
    #[error("journal line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalRecord {
    Local {
        key: DiagnosisKey,
        declared_regions: BTreeSet<RegionId>,
        testing_region: RegionId,
        stored_at: Timestamp,
    },
    Remote {
        key: DiagnosisKey,
        source: RegionId,
        stored_at: Timestamp,
    },
    Peer {
        region: RegionId,
        last_batch_id: u64,
        next_poll: Option<u64>,
    },
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        match self {
            JournalRecord::Local {
                key,
                declared_regions,
                testing_region,
                stored_at,
            } => {
                let regions: Vec<&str> = declared_regions.iter().map(RegionId::as_str).collect();
                format!(
                    "LOCAL|{}|{}|{}|{}|{}",
                    hex::encode(key.bytes()),
                    key.valid_day(),
                    regions.join(","),
                    testing_region,
                    stored_at.secs()
                )
            }
            JournalRecord::Remote {
                key,
                source,
                stored_at,
            } => format!(
                "REMOTE|{}|{}|{}|{}",
                hex::encode(key.bytes()),
                key.valid_day(),
                source,
                stored_at.secs()
            ),
            JournalRecord::Peer {
                region,
                last_batch_id,
                next_poll,
            } => format!(
                "PEER|{}|{}|{}",
                region,
                last_batch_id,
                next_poll.map(|t| t.to_string()).unwrap_or_default()
            ),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('|').collect();
        match fields.as_slice() {
            ["LOCAL", key, day, regions, testing, stored_at] => {
                let declared_regions = regions
                    .split(',')
                    .map(|r| r.parse::<RegionId>().map_err(|e| e.to_string()))
                    .collect::<Result<BTreeSet<_>, _>>()?;
                Ok(JournalRecord::Local {
                    key: parse_key(key, day)?,
                    declared_regions,
                    testing_region: testing.parse().map_err(|e| format!("{e}"))?,
                    stored_at: Timestamp(parse_num(stored_at)?),
                })
            }
            ["REMOTE", key, day, source, stored_at] => Ok(JournalRecord::Remote {
                key: parse_key(key, day)?,
                source: source.parse().map_err(|e| format!("{e}"))?,
                stored_at: Timestamp(parse_num(stored_at)?),
            }),
            ["PEER", region, last, next] => Ok(JournalRecord::Peer {
                region: region.parse().map_err(|e| format!("{e}"))?,
                last_batch_id: parse_num(last)?,
                next_poll: if next.is_empty() {
                    None
                } else {
                    Some(parse_num(next)?)
                },
            }),
            _ => Err(format!("unrecognized record {line:?}")),
        }
    }
}

fn parse_num(raw: &str) -> Result<u64, String> {
    raw.parse().map_err(|_| format!("bad integer {raw:?}"))
}

fn parse_key(hex_key: &str, day: &str) -> Result<DiagnosisKey, String> {
    let bytes = hex::decode(hex_key).map_err(|e| format!("bad key hex: {e}"))?;
    let bytes: [u8; 16] = bytes
        .try_into()
        .map_err(|_| "key must be 16 bytes".to_owned())?;
    let day = u32::try_from(parse_num(day)?).map_err(|_| "valid_day out of range".to_owned())?;
    Ok(DiagnosisKey::new(bytes, day))
}

/// Appends records to a file, flushing each line.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the journal plus its current records.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<JournalRecord>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() {
            read_records(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Journal { path, file }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, records: &[JournalRecord]) -> Result<(), JournalError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for record in records {
            buf.push_str(&record.to_line());
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }

    /// Atomically replaces the journal contents with `records`.
    pub fn rewrite(&mut self, records: &[JournalRecord]) -> Result<(), JournalError> {
        let tmp = self.path.with_extension("compact");
        {
            let mut out = File::create(&tmp)?;
            for record in records {
                writeln!(out, "{}", record.to_line())?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<JournalRecord>, JournalError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        n += 1;
        // A torn final write leaves a line without its newline; drop it.
        if !line.ends_with('\n') || line.trim().is_empty() {
            continue;
        }
        match JournalRecord::parse_line(line.trim_end()) {
            Ok(record) => records.push(record),
            Err(reason) => {
                return Err(JournalError::Parse { line: n, reason })
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_match_documented_layout() {
        let key = DiagnosisKey::new([0xAB; 16], 12);
        let local = JournalRecord::Local {
            key,
            declared_regions: ["IT".parse().unwrap(), "CH".parse().unwrap()].into(),
            testing_region: "CH".parse().unwrap(),
            stored_at: Timestamp(99),
        };
        assert_eq!(
            local.to_line(),
            "LOCAL|abababababababababababababababab|12|CH,IT|CH|99"
        );
        let remote = JournalRecord::Remote {
            key,
            source: "IT".parse().unwrap(),
            stored_at: Timestamp(5),
        };
        assert_eq!(
            remote.to_line(),
            "REMOTE|abababababababababababababababab|12|IT|5"
        );
        let peer = JournalRecord::Peer {
            region: "IT".parse().unwrap(),
            last_batch_id: 4,
            next_poll: None,
        };
        assert_eq!(peer.to_line(), "PEER|IT|4|");
        for record in [local, remote, peer] {
            assert_eq!(JournalRecord::parse_line(&record.to_line()).unwrap(), record);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(JournalRecord::parse_line("LOCAL|zz|1|CH|CH|1").is_err());
        assert!(JournalRecord::parse_line("REMOTE|ab|1|IT|1").is_err());
        assert!(JournalRecord::parse_line("PEER|it|1|").is_err());
        assert!(JournalRecord::parse_line("WHAT|1").is_err());
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.log");
        let record = JournalRecord::Peer {
            region: "CH".parse().unwrap(),
            last_batch_id: 1,
            next_poll: Some(300),
        };
        {
            let (mut journal, existing) = Journal::open(&path).unwrap();
            assert!(existing.is_empty());
            journal.append(&[record.clone()]).unwrap();
        }
        let (mut journal, existing) = Journal::open(&path).unwrap();
        assert_eq!(existing, vec![record.clone()]);
        journal.rewrite(&[]).unwrap();
        journal.append(&[record.clone()]).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![record]);
    }
}
