//! Snapshot file layout (all integers little-endian):
//!
//! ```text
//! "RBTS" | u16 version | u32 header_len | header (UTF-8 JSON)
//!        | packed vectors (u32 count + f32 components, one per identity,
//!          in header order)
//!        | u32 CRC-32C of every preceding byte
//! ```

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    IdentityRecord, ModelInstanceRecord, Registry, RegistryError, RevocationEntry, ThresholdMode,
    Timestamp,
};
use crate::embedding::{decode_vector, encode_vector, FeatureVector};
use crate::ids::ModelInstanceId;
use crate::metrics::ThresholdSpec;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RBTS";
pub const SNAPSHOT_VERSION: u16 = 1;

const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dimension: usize,
    threshold_mode: ThresholdMode,
    shared_threshold: Option<ThresholdSpec>,
    last_timestamp: Timestamp,
    seq: u64,
    instances: Vec<ModelInstanceRecord>,
    identities: Vec<IdentityMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentityMeta {
    identity_id: String,
    active_instance: ModelInstanceId,
    revocation_history: Vec<RevocationEntry>,
    enrolled_at: Timestamp,
}

fn corrupt(msg: impl Into<String>) -> RegistryError {
    RegistryError::CorruptSnapshot(msg.into())
}

pub(crate) fn encode(registry: &Registry) -> Vec<u8> {
    let ids = registry.identity_ids();
    let records: Vec<&IdentityRecord> = ids.iter().map(|id| &registry.identities[*id]).collect();
    let header = Header {
        dimension: registry.dim,
        threshold_mode: registry.mode,
        shared_threshold: registry.shared_threshold,
        last_timestamp: registry.last_timestamp,
        seq: registry.seq,
        instances: registry.instances.clone(),
        identities: records
            .iter()
            .map(|r| IdentityMeta {
                identity_id: r.identity_id.clone(),
                active_instance: r.active_instance.clone(),
                revocation_history: r.revocation_history.clone(),
                enrolled_at: r.enrolled_at,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("snapshot header serializes");

    let mut out =
        Vec::with_capacity(PREAMBLE + header.len() + records.len() * (4 + 4 * registry.dim) + 4);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for r in &records {
        encode_vector(r.template.components(), &mut out);
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Registry, RegistryError> {
    if bytes.len() < PREAMBLE + 4 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SNAPSHOT_VERSION {
        return Err(RegistryError::VersionMismatch {
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32c::crc32c(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }

    let header_len = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length out of bounds"))?;
    let header: Header = serde_json::from_slice(&body[PREAMBLE..header_end])
        .map_err(|e| corrupt(format!("header: {e}")))?;

    let mut cursor = header_end;
    let mut identities = Vec::with_capacity(header.identities.len());
    for meta in header.identities {
        let (components, used) =
            decode_vector(&body[cursor..]).map_err(|e| corrupt(format!("vector section: {e}")))?;
        cursor += used;
        let template = FeatureVector::from_persisted(components, true)
            .map_err(|e| corrupt(format!("template of {:?}: {e}", meta.identity_id)))?;
        identities.push(IdentityRecord {
            identity_id: meta.identity_id,
            active_instance: meta.active_instance,
            template,
            revocation_history: meta.revocation_history,
            enrolled_at: meta.enrolled_at,
        });
    }
    if cursor != body.len() {
        return Err(corrupt("trailing bytes after vector section"));
    }
    Registry::from_parts(
        header.dimension,
        header.threshold_mode,
        header.shared_threshold,
        header.instances,
        identities,
        header.last_timestamp,
        header.seq,
    )
    .map_err(corrupt)
}

/// Sibling path used while a snapshot is being written.
pub fn temp_path_for(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes the snapshot to a temporary sibling, syncs it, then renames it over
/// `path`. A crash at any point leaves either the old or the new file.
pub fn snapshot_save(registry: &Registry, path: &Path) -> Result<(), RegistryError> {
    let bytes = encode(registry);
    let tmp = temp_path_for(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // Persist the rename itself; not every platform allows opening dirs.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn snapshot_load(path: &Path) -> Result<Registry, RegistryError> {
    decode(&fs::read(path)?)
}
