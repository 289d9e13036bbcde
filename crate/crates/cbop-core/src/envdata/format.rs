//! On-disk dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CBOP"
//! version u32      currently 1
//! hlen    u64      header byte length
//! header  hlen     UTF-8 JSON: env id, dims, count, tag, seed, stats
//! states       count*obs_dim f32
//! actions      count*act_dim f32
//! rewards      count         f32
//! next_states  count*obs_dim f32
//! dones        count         u8 (0/1)
//! initials     count         u8 (0/1)
//! ```
//!
//! Loading is strict: wrong magic, unknown version, truncation, or header
//! fields that disagree with the payload are all hard errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::behavior::BehaviorTag;
use super::dataset::{compute_stats, Dataset, NormStats};
use crate::error::{CbopError, FormatError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"CBOP";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    env_id: String,
    obs_dim: usize,
    act_dim: usize,
    count: usize,
    tag: BehaviorTag,
    seed: u64,
    stats: NormStats,
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let (states, actions, rewards, next_states, dones, initials) = ds.columns();
    let header = DatasetHeader {
        env_id: ds.env_id.clone(),
        obs_dim: ds.obs_dim,
        act_dim: ds.act_dim,
        count: ds.len(),
        tag: ds.tag,
        seed: ds.seed,
        stats: ds.stats().clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| FormatError::Header(e.to_string()))?;

    let payload = (states.len() + actions.len() + rewards.len() + next_states.len()) * 4
        + dones.len()
        + initials.len();
    let mut buf = Vec::with_capacity(16 + header_json.len() + payload);
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for col in [states, actions, rewards, next_states] {
        for v in col {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for flags in [dones, initials] {
        buf.extend(flags.iter().map(|&b| b as u8));
    }
    Ok(buf)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::write(path, bytes).map_err(|e| CbopError::io(path.display(), e))
}

/// Cursor over the raw bytes that reports truncation with the section name
/// and exact missing byte count.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::truncated(
                section,
                self.pos + n,
                self.buf.len(),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f32_column(
        &mut self,
        n: usize,
        section: &'static str,
    ) -> std::result::Result<Vec<f32>, FormatError> {
        let raw = self.take(n * 4, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn flag_column(
        &mut self,
        n: usize,
        section: &'static str,
    ) -> std::result::Result<Vec<bool>, FormatError> {
        let raw = self.take(n, section)?;
        Ok(raw.iter().map(|&b| b != 0).collect())
    }
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        }
        .into());
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap()) as usize;
    let header_bytes = r.take(hlen, "header")?;
    let header: DatasetHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| FormatError::Header(e.to_string()))?;

    let n = header.count;
    let states = r.f32_column(n * header.obs_dim, "states")?;
    let actions = r.f32_column(n * header.act_dim, "actions")?;
    let rewards = r.f32_column(n, "rewards")?;
    let next_states = r.f32_column(n * header.obs_dim, "next_states")?;
    let dones = r.flag_column(n, "dones")?;
    let initials = r.flag_column(n, "initials")?;
    if r.pos != buf.len() {
        return Err(FormatError::HeaderMismatch(format!(
            "{} trailing bytes after the initials column",
            buf.len() - r.pos
        ))
        .into());
    }

    // integrity: stats in the header must match the payload
    let recomputed = compute_stats(
        header.obs_dim,
        header.act_dim,
        &states,
        &actions,
        &rewards,
        &next_states,
    );
    if !stats_close(&recomputed, &header.stats, 1e-9) {
        return Err(FormatError::HeaderMismatch(
            "normalization stats do not match the transition payload".into(),
        )
        .into());
    }

    Dataset::from_columns(
        header.env_id,
        header.obs_dim,
        header.act_dim,
        header.tag,
        header.seed,
        states,
        actions,
        rewards,
        next_states,
        dones,
        initials,
    )
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CbopError::io(path.display(), e))?;
    dataset_from_bytes(&bytes)
}

fn stats_close(a: &NormStats, b: &NormStats, tol: f64) -> bool {
    let vec_close = |x: &[f64], y: &[f64]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol)
    };
    vec_close(&a.state_mean, &b.state_mean)
        && vec_close(&a.state_std, &b.state_std)
        && vec_close(&a.action_mean, &b.action_mean)
        && vec_close(&a.action_std, &b.action_std)
        && vec_close(&a.delta_mean, &b.delta_mean)
        && vec_close(&a.delta_std, &b.delta_std)
        && (a.reward_mean - b.reward_mean).abs() <= tol
        && (a.reward_std - b.reward_std).abs() <= tol
}
