//! Single-file agent checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic    4 bytes  "CBPC"
//! version  u32      currently 1
//! mlen     u64      manifest byte length
//! manifest mlen     UTF-8 JSON: env id, dims, configs, block directory
//! blocks   ...      f64 little-endian arrays, concatenated in the order
//!                   the manifest lists them
//! ```
//!
//! Blocks cover every learned parameter plus optimizer moments, so a loaded
//! agent resumes training bit-for-bit: dynamics members, policy net, online
//! and target critic heads, and the Adam state for policy and critics.
//! Loading is strict — wrong magic, unknown version, truncation, trailing
//! bytes, or a manifest that disagrees with the rebuilt shapes are all hard
//! errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentState, PolicyNet, TrainConfig};
use crate::dynamics::{DynamicsEnsemble, IoNorm};
use crate::envdata::EnvSpec;
use crate::error::{CbopError, FormatError, Result};
use crate::funcapprox::{AdamState, DenseNet, Hidden, Output};
use crate::qensemble::QEnsemble;
use crate::rng;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CBPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    name: String,
    /// number of f64 values
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsMeta {
    /// full layer sizes of one member net (all members share them)
    member_sizes: Vec<usize>,
    elite_indices: Vec<usize>,
    norm: IoNorm,
    logvar_min: Vec<f64>,
    logvar_max: Vec<f64>,
    validation_nll: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    env_id: String,
    obs_dim: usize,
    act_dim: usize,
    epoch: usize,
    reward_scale: f64,
    config: TrainConfig,
    dynamics: DynamicsMeta,
    policy_opt_step: u64,
    critic_opt_steps: Vec<u64>,
    blocks: Vec<BlockEntry>,
}

fn push_block(blocks: &mut Vec<BlockEntry>, payload: &mut Vec<f64>, name: String, data: Vec<f64>) {
    blocks.push(BlockEntry {
        name,
        len: data.len(),
    });
    payload.extend(data);
}

pub fn checkpoint_to_bytes(agent: &AgentState, config: &TrainConfig) -> Result<Vec<u8>> {
    let dynamics = &agent.dynamics;
    if dynamics.validation_nll.iter().any(|v| !v.is_finite()) {
        return Err(CbopError::InvalidConfig(
            "checkpoint requires finite dynamics validation NLLs (train the ensemble first)"
                .into(),
        ));
    }

    let mut blocks = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (k, member) in dynamics.members().iter().enumerate() {
        push_block(
            &mut blocks,
            &mut payload,
            format!("dynamics.member.{k}"),
            member.params_flat(),
        );
    }
    push_block(
        &mut blocks,
        &mut payload,
        "policy".into(),
        agent.policy.net().params_flat(),
    );
    for (m, head) in agent.critic.heads().iter().enumerate() {
        push_block(
            &mut blocks,
            &mut payload,
            format!("critic.online.{m}"),
            head.params_flat(),
        );
    }
    for (m, target) in agent.critic.targets().iter().enumerate() {
        push_block(
            &mut blocks,
            &mut payload,
            format!("critic.target.{m}"),
            target.params_flat(),
        );
    }
    push_block(
        &mut blocks,
        &mut payload,
        "opt.policy".into(),
        agent.policy_opt.moments_flat(),
    );
    for (m, opt) in agent.critic_opts.iter().enumerate() {
        push_block(
            &mut blocks,
            &mut payload,
            format!("opt.critic.{m}"),
            opt.moments_flat(),
        );
    }

    let manifest = Manifest {
        env_id: agent.env.id.to_string(),
        obs_dim: agent.env.obs_dim,
        act_dim: agent.env.act_dim,
        epoch: agent.epoch,
        reward_scale: agent.reward_scale,
        config: config.clone(),
        dynamics: DynamicsMeta {
            member_sizes: dynamics.members()[0].sizes().to_vec(),
            elite_indices: dynamics.elite_indices().to_vec(),
            norm: dynamics.norm.clone(),
            logvar_min: dynamics.logvar_min.clone(),
            logvar_max: dynamics.logvar_max.clone(),
            validation_nll: dynamics.validation_nll.clone(),
        },
        policy_opt_step: agent.policy_opt.step_count(),
        critic_opt_steps: agent.critic_opts.iter().map(|o| o.step_count()).collect(),
        blocks,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| FormatError::Header(e.to_string()))?;

    let mut buf = Vec::with_capacity(16 + manifest_json.len() + payload.len() * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn save_checkpoint(agent: &AgentState, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(agent, config)?;
    std::fs::write(path, bytes).map_err(|e| CbopError::io(path.display(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::truncated(section, self.pos + n, self.buf.len()).into());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f64_block(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(AgentState, TrainConfig)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let mlen = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().unwrap()) as usize;
    let manifest_bytes = r.take(mlen, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| FormatError::Header(e.to_string()))?;

    let env = EnvSpec::by_id(&manifest.env_id)?;
    if env.obs_dim != manifest.obs_dim || env.act_dim != manifest.act_dim {
        return Err(FormatError::HeaderMismatch(format!(
            "manifest dims {}x{} do not match env '{}'",
            manifest.obs_dim, manifest.act_dim, manifest.env_id
        ))
        .into());
    }
    let config = manifest.config.clone();
    config.validate()?;

    // rebuild every net at its recorded shape, then verify the block
    // directory against the true parameter counts before touching payload
    let k_total = manifest.dynamics.validation_nll.len();
    if k_total == 0 || k_total > 4096 {
        return Err(FormatError::HeaderMismatch(format!(
            "manifest lists {k_total} dynamics members"
        ))
        .into());
    }
    let ms = &manifest.dynamics.member_sizes;
    if ms.len() < 2
        || ms.iter().any(|&s| s == 0)
        || ms[0] != env.obs_dim + env.act_dim
        || *ms.last().unwrap() != 2 * (env.obs_dim + 1)
    {
        return Err(FormatError::HeaderMismatch(format!(
            "dynamics member sizes {ms:?} do not fit env '{}'",
            manifest.env_id
        ))
        .into());
    }
    let mut scratch = rng::stream(0, &[0]);
    let members: Vec<DenseNet> = (0..k_total)
        .map(|_| {
            DenseNet::new(
                &manifest.dynamics.member_sizes,
                Hidden::Relu,
                Output::Identity,
                &mut scratch,
            )
        })
        .collect();
    let policy = PolicyNet::new(
        env.obs_dim,
        env.act_dim,
        &config.policy_hidden,
        &env.action_low,
        &env.action_high,
        config.entropy_temperature,
        config.seed,
    )?;
    let critic = QEnsemble::new(
        config.m,
        env.obs_dim,
        env.act_dim,
        &config.q_hidden,
        Hidden::Relu,
        config.seed,
    )?;

    let mut expected: Vec<(String, usize)> = Vec::new();
    for (k, member) in members.iter().enumerate() {
        expected.push((format!("dynamics.member.{k}"), member.num_params()));
    }
    expected.push(("policy".into(), policy.net().num_params()));
    let head_params = critic.heads()[0].num_params();
    for m in 0..config.m {
        expected.push((format!("critic.online.{m}"), head_params));
    }
    for m in 0..config.m {
        expected.push((format!("critic.target.{m}"), head_params));
    }
    expected.push(("opt.policy".into(), 2 * policy.net().num_params()));
    for m in 0..config.m {
        expected.push((format!("opt.critic.{m}"), 2 * head_params));
    }
    if manifest.blocks.len() != expected.len() {
        return Err(FormatError::HeaderMismatch(format!(
            "manifest lists {} blocks, layout requires {}",
            manifest.blocks.len(),
            expected.len()
        ))
        .into());
    }
    for (entry, (name, len)) in manifest.blocks.iter().zip(&expected) {
        if &entry.name != name || entry.len != *len {
            return Err(FormatError::HeaderMismatch(format!(
                "block '{}' ({} values) where '{}' ({} values) belongs",
                entry.name, entry.len, name, len
            ))
            .into());
        }
    }
    if manifest.critic_opt_steps.len() != config.m {
        return Err(FormatError::HeaderMismatch(format!(
            "{} critic optimizer steps for {} heads",
            manifest.critic_opt_steps.len(),
            config.m
        ))
        .into());
    }

    let mut members = members;
    for member in members.iter_mut() {
        let flat = r.f64_block(member.num_params(), "dynamics member")?;
        member.set_params_flat(&flat)?;
    }
    let mut policy = policy;
    let flat = r.f64_block(policy.net().num_params(), "policy")?;
    policy.net_mut().set_params_flat(&flat)?;
    let mut critic = critic;
    for m in 0..config.m {
        let flat = r.f64_block(head_params, "critic online")?;
        critic.head_mut(m).set_params_flat(&flat)?;
    }
    for m in 0..config.m {
        let flat = r.f64_block(head_params, "critic target")?;
        critic.target_mut(m).set_params_flat(&flat)?;
    }
    let mut policy_opt = AdamState::new(policy.net());
    let flat = r.f64_block(2 * policy.net().num_params(), "policy optimizer")?;
    policy_opt.set_moments_flat(manifest.policy_opt_step, &flat)?;
    let mut critic_opts: Vec<AdamState> = critic.heads().iter().map(AdamState::new).collect();
    for (m, opt) in critic_opts.iter_mut().enumerate() {
        let flat = r.f64_block(2 * head_params, "critic optimizer")?;
        opt.set_moments_flat(manifest.critic_opt_steps[m], &flat)?;
    }
    if r.pos != buf.len() {
        return Err(FormatError::HeaderMismatch(format!(
            "{} trailing bytes after the last block",
            buf.len() - r.pos
        ))
        .into());
    }

    let mut dynamics = DynamicsEnsemble::from_parts(
        members,
        manifest.dynamics.elite_indices.clone(),
        env.obs_dim,
        env.act_dim,
        manifest.dynamics.norm.clone(),
    )?;
    dynamics.logvar_min = manifest.dynamics.logvar_min.clone();
    dynamics.logvar_max = manifest.dynamics.logvar_max.clone();
    dynamics.validation_nll = manifest.dynamics.validation_nll.clone();

    let agent = AgentState {
        policy,
        critic,
        dynamics,
        env,
        policy_opt,
        critic_opts,
        epoch: manifest.epoch,
        reward_scale: manifest.reward_scale,
        metrics: Vec::new(),
    };
    Ok((agent, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(AgentState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| CbopError::io(path.display(), e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{cbop_train_epoch, AgentState};
    use crate::dynamics::{train_dynamics, DynamicsConfig};
    use crate::envdata::{generate_dataset, BehaviorTag, Dataset, GenConfig};
    use crate::mat::Mat;
    use crate::qensemble::Which;

    fn fixture() -> (AgentState, TrainConfig, Dataset) {
        let env = EnvSpec::point_mass();
        let dataset = generate_dataset(&GenConfig {
            env_id: env.id.to_string(),
            tag: BehaviorTag::Random,
            size: 400,
            noise_scale: 1.0,
            seed: 21,
        })
        .unwrap();
        let dynamics = train_dynamics(
            &dataset,
            &DynamicsConfig {
                k_total: 2,
                k_elite: 2,
                hidden: vec![16],
                epochs: 2,
                batch_size: 64,
                lr: 1e-3,
                validation_fraction: 0.1,
                bootstrap_resample: false,
                patience: None,
                seed: 3,
            },
        )
        .unwrap();
        let config = TrainConfig {
            horizon: 1,
            m: 2,
            q_hidden: vec![12],
            policy_hidden: vec![12],
            batch_size: 4,
            epochs: 1,
            steps_per_epoch: 2,
            eval_episodes: 1,
            seed: 13,
            ..TrainConfig::desk()
        };
        let mut agent = AgentState::new(&env, &dataset, dynamics, &config).unwrap();
        cbop_train_epoch(&mut agent, &dataset, &config).unwrap();
        (agent, config, dataset)
    }

    #[test]
    fn round_trip_is_byte_identical_and_behavior_preserving() {
        let (agent, config, dataset) = fixture();
        let bytes = checkpoint_to_bytes(&agent, &config).unwrap();
        let (loaded, loaded_config) = checkpoint_from_bytes(&bytes).unwrap();
        let bytes2 = checkpoint_to_bytes(&loaded, &loaded_config).unwrap();
        assert_eq!(bytes, bytes2);

        assert_eq!(loaded.epoch(), agent.epoch());
        assert_eq!(loaded.reward_scale, agent.reward_scale);
        assert_eq!(loaded.env.id, agent.env.id);

        // behavior: same actions, same q values, and identical continued
        // training (optimizer moments included)
        let probe = Mat::from_row(&[0.2, -0.1, 0.4, 0.0]);
        assert_eq!(
            loaded.policy.act_mean(&probe).unwrap().data(),
            agent.policy.act_mean(&probe).unwrap().data()
        );
        let sa = Mat::from_row(&[0.2, -0.1, 0.4, 0.0, 0.3, -0.3]);
        assert_eq!(
            loaded.critic.q_values_all(&sa, Which::Target).unwrap().data(),
            agent.critic.q_values_all(&sa, Which::Target).unwrap().data()
        );

        let mut a = agent;
        let mut b = loaded;
        let ma = cbop_train_epoch(&mut a, &dataset, &config).unwrap();
        let mb = cbop_train_epoch(&mut b, &dataset, &config).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn file_round_trip() {
        let (agent, config, _) = fixture();
        let dir = std::env::temp_dir().join("cbop_checkpoint_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("agent.cbpc");
        save_checkpoint(&agent, &config, &path).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        assert_eq!(
            checkpoint_to_bytes(&loaded, &loaded_config).unwrap(),
            checkpoint_to_bytes(&agent, &config).unwrap()
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let (agent, config, _) = fixture();
        let bytes = checkpoint_to_bytes(&agent, &config).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(CbopError::Format(FormatError::BadMagic { .. }))
        ));

        let mut bad = bytes;
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(CbopError::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let (agent, config, _) = fixture();
        let bytes = checkpoint_to_bytes(&agent, &config).unwrap();

        match checkpoint_from_bytes(&bytes[..bytes.len() - 3]) {
            Err(CbopError::Format(FormatError::Truncated { section, .. })) => {
                assert_eq!(section, "critic optimizer");
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
        match checkpoint_from_bytes(&bytes[..6]) {
            Err(CbopError::Format(FormatError::Truncated { section, .. })) => {
                assert_eq!(section, "version");
            }
            other => panic!("expected Truncated, got {other:?}"),
        }

        let mut padded = bytes;
        padded.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            checkpoint_from_bytes(&padded),
            Err(CbopError::Format(FormatError::HeaderMismatch(_)))
        ));
    }

    #[test]
    fn unknown_env_id_is_rejected() {
        let (agent, config, _) = fixture();
        let bytes = checkpoint_to_bytes(&agent, &config).unwrap();
        // same-length unknown id keeps every offset valid
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[16..16 + mlen].to_vec())
            .unwrap()
            .replacen("point_mass_2d", "paint_mass_2d", 1);
        let mut tampered = bytes[..16].to_vec();
        tampered.extend_from_slice(manifest.as_bytes());
        tampered.extend_from_slice(&bytes[16 + mlen..]);
        assert!(matches!(
            checkpoint_from_bytes(&tampered),
            Err(CbopError::UnknownEnv(_))
        ));
    }

    #[test]
    fn tampered_block_directory_is_rejected() {
        let (agent, config, _) = fixture();
        let bytes = checkpoint_to_bytes(&agent, &config).unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        let len = manifest["blocks"][0]["len"].as_u64().unwrap();
        manifest["blocks"][0]["len"] = serde_json::Value::from(len + 1);
        let new_json = serde_json::to_vec(&manifest).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..8]);
        tampered.extend_from_slice(&(new_json.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&new_json);
        tampered.extend_from_slice(&bytes[16 + mlen..]);
        assert!(matches!(
            checkpoint_from_bytes(&tampered),
            Err(CbopError::Format(FormatError::HeaderMismatch(_)))
        ));
    }
}
