use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{snapshot_load, snapshot_save, Mutation, Registry, RegistryError, ThresholdMode};

const SNAPSHOT_FILE: &str = "registry.snap";
const JOURNAL_FILE: &str = "journal.jsonl";

/// One journaled mutation; `seq` is the registry sequence number after applying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub mutation: Mutation,
}

/// A registry persisted as a snapshot plus a write-ahead journal of the
/// mutations applied since that snapshot.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    journal: File,
    journal_len: u64,
    since_checkpoint: usize,
}

impl Store {
    /// Opens (or initializes) a store directory and rebuilds the registry:
    /// load the snapshot, then replay journal entries newer than it. A torn
    /// final journal line (crash mid-append) is discarded.
    pub fn open(
        dir: &Path,
        default_dim: usize,
        default_mode: ThresholdMode,
    ) -> Result<(Self, Registry), RegistryError> {
        fs::create_dir_all(dir)?;
        let snap = dir.join(SNAPSHOT_FILE);
        let mut registry = if snap.exists() {
            snapshot_load(&snap)?
        } else {
            Registry::new(default_dim, default_mode)
        };

        let journal_path = dir.join(JOURNAL_FILE);
        let mut valid_len = 0u64;
        let mut replayed = 0;
        if journal_path.exists() {
            let reader = BufReader::new(File::open(&journal_path)?);
            let mut lines = reader.split(b'\n').peekable();
            while let Some(line) = lines.next() {
                let line = line?;
                let is_last = lines.peek().is_none();
                let entry: JournalEntry = match serde_json::from_slice(&line) {
                    Ok(e) => e,
                    Err(_) if is_last => break,
                    Err(e) => {
                        return Err(RegistryError::CorruptJournal(format!(
                            "unparseable entry at byte {valid_len}: {e}"
                        )))
                    }
                };
                if entry.seq > registry.seq() {
                    if entry.seq != registry.seq() + 1 {
                        return Err(RegistryError::CorruptJournal(format!(
                            "gap: expected seq {}, found {}",
                            registry.seq() + 1,
                            entry.seq
                        )));
                    }
                    registry.apply(&entry.mutation).map_err(|e| {
                        RegistryError::CorruptJournal(format!("seq {}: {e}", entry.seq))
                    })?;
                    replayed += 1;
                }
                valid_len += line.len() as u64 + 1;
            }
        }
        let journal = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&journal_path)?;
        journal.set_len(valid_len)?;
        let mut store = Self {
            dir: dir.to_path_buf(),
            journal,
            journal_len: valid_len,
            since_checkpoint: replayed,
        };
        store.journal.seek(SeekFrom::Start(valid_len))?;
        Ok((store, registry))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join(SNAPSHOT_FILE)
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    /// Mutations journaled since the last checkpoint.
    pub fn pending(&self) -> usize {
        self.since_checkpoint
    }

    /// Durably appends one mutation. On failure the journal is rolled back to
    /// its previous length.
    pub fn append(&mut self, seq: u64, mutation: &Mutation) -> Result<(), RegistryError> {
        let mut line = serde_json::to_vec(&JournalEntry {
            seq,
            mutation: mutation.clone(),
        })
        .expect("journal entry serializes");
        line.push(b'\n');
        let result = self
            .journal
            .write_all(&line)
            .and_then(|_| self.journal.sync_data());
        if let Err(e) = result {
            let _ = self.journal.set_len(self.journal_len);
            let _ = self.journal.seek(SeekFrom::Start(self.journal_len));
            return Err(e.into());
        }
        self.journal_len += line.len() as u64;
        self.since_checkpoint += 1;
        Ok(())
    }

    /// Writes a full snapshot, then empties the journal.
    pub fn checkpoint(&mut self, registry: &Registry) -> Result<(), RegistryError> {
        snapshot_save(registry, &self.snapshot_path())?;
        self.journal.set_len(0)?;
        self.journal.seek(SeekFrom::Start(0))?;
        self.journal.sync_all()?;
        self.journal_len = 0;
        self.since_checkpoint = 0;
        Ok(())
    }

    /// Reads every journal entry currently on disk.
    pub fn read_journal(&self) -> Result<Vec<JournalEntry>, RegistryError> {
        let reader = BufReader::new(File::open(self.journal_path())?);
        reader
            .lines()
            .map(|l| {
                let l = l?;
                serde_json::from_str(&l).map_err(|e| RegistryError::CorruptJournal(e.to_string()))
            })
            .collect()
    }
}
