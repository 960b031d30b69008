//! Adapter checkpoint files and the multi-tenant registry built on them.
//!
//! A checkpoint persists only each module's trainable latent plus the
//! metadata needed to rebuild the frozen projections from the base weights
//! (init kind, seed, iteration count) and digests to prove the rebuild
//! matches. That keeps checkpoint size independent of the model's hidden
//! dimensions. A self-contained variant embeds the frozen pair too, for
//! archival, at the cost of that independence.

mod container;
mod store;

pub use container::{
    load_single_tensor, load_tensors, save_tensors, StorageDtype, FORMAT_VERSION, MAGIC_CHECKPOINT,
    MAGIC_WEIGHTS,
};
pub use store::{GcReport, ManifestEntry, Registry, VerifyReport, VerifyStatus};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{InitKind, LoraXsAdapter};
use crate::digest::{from_hex, matrix_digest, to_hex};
use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::rng;

/// Serializes model dims as fixed-width decimal strings so checkpoint byte
/// size does not depend on how many digits the hidden dimension has. The
/// deserializer accepts plain numbers too.
mod fixed_width {
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:020}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = u64;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a u64 or a decimal string")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
                Ok(v)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRoot {
    format_version: u32,
    base_model_id: String,
    storage_dtype: StorageDtype,
    self_contained: bool,
    /// Convention echoes, so a reader can reproduce the construction.
    scaling: String,
    sign_convention: String,
    oversampling: String,
    orthonormalization: String,
    entries: Vec<MetaEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaEntry {
    module_name: String,
    rank: u64,
    alpha: f64,
    sigma: f64,
    init_kind: InitKind,
    svd_seed: u64,
    n_iter: u32,
    #[serde(with = "fixed_width")]
    m: u64,
    #[serde(with = "fixed_width")]
    n: u64,
    a_digest: String,
    b_digest: String,
    r_offset: u64,
    r_len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b_len: Option<u64>,
}

/// One module's stored state, as parsed from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub module_name: String,
    pub rank: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub init_kind: InitKind,
    pub svd_seed: u64,
    pub n_iter: u32,
    pub rows_m: usize,
    pub cols_n: usize,
    pub a_digest: [u8; 32],
    pub b_digest: [u8; 32],
    pub r_latent: Matrix,
    pub a_frozen: Option<Matrix>,
    pub b_frozen: Option<Matrix>,
}

/// A parsed, checksum-verified checkpoint.
#[derive(Debug, Clone)]
pub struct AdapterCheckpoint {
    pub format_version: u32,
    pub base_model_id: String,
    pub storage_dtype: StorageDtype,
    pub self_contained: bool,
    pub entries: Vec<CheckpointEntry>,
    pub payload_checksum: [u8; 32],
}

impl AdapterCheckpoint {
    /// Content-addressed id: hex of the payload checksum.
    pub fn id(&self) -> String {
        to_hex(&self.payload_checksum)
    }

    pub fn entry(&self, module: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.module_name == module)
    }
}

/// Options for [`save_checkpoint`].
#[derive(Debug, Clone)]
pub struct SaveOptions {
    pub base_model_id: String,
    pub storage_dtype: StorageDtype,
    /// Embed the frozen projection pair beside each latent (archival form).
    pub self_contained: bool,
}

impl Default for SaveOptions {
    fn default() -> Self {
        SaveOptions {
            base_model_id: String::new(),
            storage_dtype: StorageDtype::F64,
            self_contained: false,
        }
    }
}

/// Writes the named adapters to a checkpoint file (atomic: temp + rename) and
/// returns the content-addressed checkpoint id. Module order in the file is
/// the map's (sorted) order, so equal content always gets equal bytes.
pub fn save_checkpoint(
    adapters: &BTreeMap<String, LoraXsAdapter>,
    opts: &SaveOptions,
    path: &Path,
) -> Result<String> {
    if adapters.is_empty() {
        return Err(Error::Param {
            name: "adapters",
            reason: "at least one adapter required".into(),
        });
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(adapters.len());
    for (name, ad) in adapters {
        let r_offset = payload.len() as u64;
        container::encode_matrix(&mut payload, ad.r_latent(), opts.storage_dtype)?;
        entries.push(MetaEntry {
            module_name: name.clone(),
            rank: ad.rank() as u64,
            alpha: ad.alpha(),
            sigma: ad.sigma(),
            init_kind: ad.init_kind(),
            svd_seed: ad.svd_seed(),
            n_iter: ad.n_iter(),
            m: ad.out_dim() as u64,
            n: ad.in_dim() as u64,
            a_digest: to_hex(&matrix_digest(ad.a_frozen())),
            b_digest: to_hex(&matrix_digest(ad.b_frozen())),
            r_offset,
            r_len: payload.len() as u64 - r_offset,
            a_offset: None,
            a_len: None,
            b_offset: None,
            b_len: None,
        });
    }
    if opts.self_contained {
        for (entry, (_, ad)) in entries.iter_mut().zip(adapters) {
            let a_offset = payload.len() as u64;
            container::encode_matrix(&mut payload, ad.a_frozen(), opts.storage_dtype)?;
            entry.a_offset = Some(a_offset);
            entry.a_len = Some(payload.len() as u64 - a_offset);
            let b_offset = payload.len() as u64;
            container::encode_matrix(&mut payload, ad.b_frozen(), opts.storage_dtype)?;
            entry.b_offset = Some(b_offset);
            entry.b_len = Some(payload.len() as u64 - b_offset);
        }
    }

    let meta = MetaRoot {
        format_version: FORMAT_VERSION,
        base_model_id: opts.base_model_id.clone(),
        storage_dtype: opts.storage_dtype,
        self_contained: opts.self_contained,
        scaling: "alpha_over_rank".into(),
        sign_convention: "largest_abs_entry_positive".into(),
        oversampling: "rank_plus_min_10".into(),
        orthonormalization: "qr_each_half_iteration".into(),
        entries,
    };
    let metadata = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let checksum = container::write_container(path, MAGIC_CHECKPOINT, &metadata, &payload)?;
    Ok(to_hex(&checksum))
}

/// Parses and checksum-verifies a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<AdapterCheckpoint> {
    let raw = container::read_container(path, MAGIC_CHECKPOINT)?;
    let meta: MetaRoot = serde_json::from_slice(&raw.metadata).map_err(|e| Error::Format {
        reason: format!("metadata JSON: {e}"),
    })?;
    let slice = |name: &str, offset: u64, len: u64| -> Result<&[u8]> {
        let end = offset.checked_add(len).ok_or_else(|| Error::Format {
            reason: format!("{name} tensor region overflows"),
        })?;
        if end > raw.payload.len() as u64 {
            return Err(Error::Format {
                reason: format!("{name} tensor extends past the payload"),
            });
        }
        Ok(&raw.payload[offset as usize..end as usize])
    };
    let digest = |hex: &str, which: &str| -> Result<[u8; 32]> {
        from_hex(hex)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Format {
                reason: format!("{which} digest is not a 32-byte hex string"),
            })
    };

    let mut entries = Vec::with_capacity(meta.entries.len());
    for e in &meta.entries {
        let rank = e.rank as usize;
        if rank == 0 {
            return Err(Error::Format {
                reason: format!("module `{}` has rank 0", e.module_name),
            });
        }
        let r_latent = container::decode_matrix(
            slice("latent", e.r_offset, e.r_len)?,
            rank,
            rank,
            meta.storage_dtype,
        )?;
        let a_frozen = match (e.a_offset, e.a_len) {
            (Some(off), Some(len)) => Some(container::decode_matrix(
                slice("a", off, len)?,
                rank,
                e.n as usize,
                meta.storage_dtype,
            )?),
            _ => None,
        };
        let b_frozen = match (e.b_offset, e.b_len) {
            (Some(off), Some(len)) => Some(container::decode_matrix(
                slice("b", off, len)?,
                e.m as usize,
                rank,
                meta.storage_dtype,
            )?),
            _ => None,
        };
        entries.push(CheckpointEntry {
            module_name: e.module_name.clone(),
            rank,
            alpha: e.alpha,
            sigma: e.sigma,
            init_kind: e.init_kind,
            svd_seed: e.svd_seed,
            n_iter: e.n_iter,
            rows_m: e.m as usize,
            cols_n: e.n as usize,
            a_digest: digest(&e.a_digest, "a")?,
            b_digest: digest(&e.b_digest, "b")?,
            r_latent,
            a_frozen,
            b_frozen,
        });
    }
    Ok(AdapterCheckpoint {
        format_version: meta.format_version,
        base_model_id: meta.base_model_id,
        storage_dtype: meta.storage_dtype,
        self_contained: meta.self_contained,
        entries,
        payload_checksum: raw.checksum,
    })
}

/// Rebuilds each entry's frozen pair from the given base weights, verifies
/// the recomputed digests against the stored ones, and installs the stored
/// latent. A digest mismatch means the base weights are not the ones the
/// checkpoint was built against.
pub fn attach_checkpoint(
    checkpoint: &AdapterCheckpoint,
    base_weights: &BTreeMap<String, Matrix>,
) -> Result<BTreeMap<String, LoraXsAdapter>> {
    let missing: Vec<String> = checkpoint
        .entries
        .iter()
        .filter(|e| !base_weights.contains_key(&e.module_name))
        .map(|e| e.module_name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingModules { names: missing });
    }

    let mut out = BTreeMap::new();
    for entry in &checkpoint.entries {
        let w = &base_weights[&entry.module_name];
        if w.rows() != entry.rows_m || w.cols() != entry.cols_n {
            return Err(Error::Param {
                name: "base_weights",
                reason: format!(
                    "module `{}`: base weight is {}x{}, checkpoint expects {}x{}",
                    entry.module_name,
                    w.rows(),
                    w.cols(),
                    entry.rows_m,
                    entry.cols_n
                ),
            });
        }
        let (a_frozen, b_frozen) = rebuild_frozen_pair(entry, w)?;
        if matrix_digest(&a_frozen) != entry.a_digest {
            return Err(Error::BaseModelMismatch {
                module: entry.module_name.clone(),
                which: "a",
            });
        }
        if matrix_digest(&b_frozen) != entry.b_digest {
            return Err(Error::BaseModelMismatch {
                module: entry.module_name.clone(),
                which: "b",
            });
        }
        let adapter = LoraXsAdapter::from_parts(
            a_frozen,
            b_frozen,
            entry.r_latent.clone(),
            entry.alpha,
            entry.init_kind,
            entry.svd_seed,
            entry.n_iter,
            entry.sigma,
        );
        out.insert(entry.module_name.clone(), adapter);
    }
    Ok(out)
}

/// Reconstructs the frozen pair the way the original init produced it.
fn rebuild_frozen_pair(entry: &CheckpointEntry, w: &Matrix) -> Result<(Matrix, Matrix)> {
    match entry.init_kind {
        InitKind::Svd => {
            let f = truncated_svd(w, entry.rank, entry.n_iter, entry.svd_seed)?;
            Ok((f.v.transpose(), f.u.scale_columns(&f.s)?))
        }
        InitKind::Random => {
            // Same stream and draw order as the random initializer: a, then b.
            let mut rng = rng::seeded(entry.svd_seed);
            let a = rng::kaiming_uniform_matrix(entry.rank, entry.cols_n, entry.cols_n, &mut rng);
            let b = rng::kaiming_uniform_matrix(entry.rows_m, entry.rank, entry.rank, &mut rng);
            Ok((a, b))
        }
    }
}

/// Copies each source latent into the same-named target adapter. Ranks must
/// match; the targets' frozen pairs are untouched.
pub fn warm_start(
    targets: &mut BTreeMap<String, LoraXsAdapter>,
    source: &AdapterCheckpoint,
) -> Result<()> {
    // Validate everything first so a failure cannot leave a partial copy.
    for (name, target) in targets.iter() {
        let entry = source.entry(name).ok_or_else(|| Error::MissingModules {
            names: vec![name.clone()],
        })?;
        if entry.rank != target.rank() {
            return Err(Error::RankMismatch {
                module: name.clone(),
                source_rank: entry.rank,
                target_rank: target.rank(),
            });
        }
    }
    for (name, target) in targets.iter_mut() {
        let entry = source.entry(name).expect("validated above");
        target.set_r_latent(entry.r_latent.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
