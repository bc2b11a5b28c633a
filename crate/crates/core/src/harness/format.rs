//! On-disk artifacts: one UTF-8 JSON header line followed by a little-endian
//! binary body. Every header carries a magic string, the format version, the
//! hash of the configuration that produced the artifact and a SHA-256 of the
//! body, so truncated, corrupted or mismatched files are refused whole.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{DatasetHeader, Transition, TransitionDataset};
use crate::error::{MoanError, Result};
use crate::model::{Discriminator, DynamicsEnsemble, Normalizer};
use crate::nn::{NetSpec, Network};
use crate::sac::SquashedGaussianPolicy;

pub const DATASET_MAGIC: &str = "MOAN-DATASET";
pub const CHECKPOINT_MAGIC: &str = "MOAN-CKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Record flag bits stored in the trailing byte of every transition.
const FLAG_DONE: u8 = 1;
const FLAG_TERMINAL: u8 = 2;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> MoanError {
    MoanError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Splits a file into its JSON header line and binary body.
fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "no header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err(path, "header is not UTF-8"))?;
    Ok((line, &bytes[nl + 1..]))
}

fn parse_header<T: DeserializeOwned>(line: &str, path: &Path) -> Result<T> {
    serde_json::from_str(line).map_err(|e| format_err(path, format!("bad header: {e}")))
}

fn check_magic(magic: &str, version: u32, expected: &str, path: &Path) -> Result<()> {
    if magic != expected {
        return Err(format_err(path, format!("magic `{magic}`, expected `{expected}`")));
    }
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("format version {version}, this build reads version {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

fn check_hash(found: &str, expected: Option<&str>, path: &Path) -> Result<()> {
    match expected {
        Some(want) if want != found => Err(format_err(
            path,
            format!("config hash {found} does not match the expected {want}"),
        )),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------- records

pub fn record_size(d_s: usize, d_a: usize) -> usize {
    4 * (2 * d_s + d_a + 1) + 1
}

fn encode_records(records: &[Transition], out: &mut Vec<u8>) {
    for t in records {
        for v in t.s.iter().chain(&t.a).chain(&t.s_next) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&t.r.to_le_bytes());
        let mut flags = 0;
        if t.done {
            flags |= FLAG_DONE;
        }
        if t.terminal {
            flags |= FLAG_TERMINAL;
        }
        out.push(flags);
    }
}

fn decode_records(body: &[u8], count: usize, d_s: usize, d_a: usize, path: &Path) -> Result<Vec<Transition>> {
    let size = record_size(d_s, d_a);
    if body.len() != count * size {
        return Err(format_err(
            path,
            format!("body holds {} bytes, {count} records need {}", body.len(), count * size),
        ));
    }
    let f32_at = |chunk: &[u8], i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let mut records = Vec::with_capacity(count);
    for (i, chunk) in body.chunks_exact(size).enumerate() {
        let s: Vec<f32> = (0..d_s).map(|k| f32_at(chunk, k)).collect();
        let a: Vec<f32> = (0..d_a).map(|k| f32_at(chunk, d_s + k)).collect();
        let s_next: Vec<f32> = (0..d_s).map(|k| f32_at(chunk, d_s + d_a + k)).collect();
        let r = f32_at(chunk, 2 * d_s + d_a);
        let flags = chunk[size - 1];
        if flags & !(FLAG_DONE | FLAG_TERMINAL) != 0 || (flags & FLAG_TERMINAL != 0 && flags & FLAG_DONE == 0) {
            return Err(format_err(path, format!("record {i} has invalid flag byte {flags:#04x}")));
        }
        let t = Transition {
            s,
            a,
            s_next,
            r,
            done: flags & FLAG_DONE != 0,
            terminal: flags & FLAG_TERMINAL != 0,
        };
        if !t.is_finite() {
            return Err(format_err(path, format!("record {i} is not finite")));
        }
        records.push(t);
    }
    Ok(records)
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetFileHeader {
    magic: String,
    version: u32,
    config_hash: String,
    records_sha256: String,
    #[serde(flatten)]
    header: DatasetHeader,
}

/// Canonical dataset bytes: header line, then `count` records of
/// `d_s f32 (s), d_a f32 (a), d_s f32 (s'), f32 (r), u8 (flags)`.
/// Flag bit 0 is `done` (episode end), bit 1 marks a terminal state.
pub fn encode_dataset(ds: &TransitionDataset, config_hash: &str) -> Result<Vec<u8>> {
    if ds.header.count != ds.records.len() {
        return Err(MoanError::Domain(format!(
            "dataset header says {} records, holds {}",
            ds.header.count,
            ds.records.len()
        )));
    }
    let mut body = Vec::with_capacity(ds.records.len() * record_size(ds.header.d_s, ds.header.d_a));
    encode_records(&ds.records, &mut body);
    let header = DatasetFileHeader {
        magic: DATASET_MAGIC.into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        records_sha256: sha256_hex(&body),
        header: ds.header.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses canonical dataset bytes; returns the dataset and its config hash.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<(TransitionDataset, String)> {
    let (line, body) = split_header(bytes, path)?;
    let h: DatasetFileHeader = parse_header(line, path)?;
    check_magic(&h.magic, h.version, DATASET_MAGIC, path)?;
    let size = record_size(h.header.d_s, h.header.d_a);
    if body.len() != h.header.count * size {
        return Err(format_err(
            path,
            format!("truncated or oversized body: {} bytes for {} records", body.len(), h.header.count),
        ));
    }
    if sha256_hex(body) != h.records_sha256 {
        return Err(format_err(path, "records checksum mismatch"));
    }
    let records = decode_records(body, h.header.count, h.header.d_s, h.header.d_a, path)?;
    Ok((
        TransitionDataset {
            header: h.header,
            records,
        },
        h.config_hash,
    ))
}

pub fn save_dataset(path: &Path, ds: &TransitionDataset, config_hash: &str) -> Result<()> {
    write_atomic(path, &encode_dataset(ds, config_hash)?)
}

/// Loads a dataset, refusing it when `expected_hash` is given and differs.
pub fn load_dataset(path: &Path, expected_hash: Option<&str>) -> Result<(TransitionDataset, String)> {
    let bytes = fs::read(path).map_err(|e| MoanError::Missing(format!("{}: {e}", path.display())))?;
    let (ds, hash) = decode_dataset(&bytes, path)?;
    check_hash(&hash, expected_hash, path)?;
    Ok((ds, hash))
}

/// The records checksum recorded in a dataset file header.
pub fn dataset_records_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let (line, _) = split_header(&bytes, path)?;
    let h: DatasetFileHeader = parse_header(line, path)?;
    Ok(h.records_sha256)
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Dynamics ensemble members `0..N-1`, then the discriminator.
    Model,
    /// Offline-trained policy.
    Policy,
    /// Medium and expert behavior policies plus the online replay stream.
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    kind: CheckpointKind,
    config_hash: String,
    param_count: usize,
    #[serde(default)]
    record_count: usize,
    payload_sha256: String,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    state_dim: usize,
    action_dim: usize,
    member_spec: NetSpec,
    disc_spec: NetSpec,
    ensemble_size: usize,
    input_norm: Normalizer,
    output_norm: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyMeta {
    env_id: String,
    spec: NetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BehaviorMeta {
    env_id: String,
    spec: NetSpec,
    medium_return: f64,
    expert_return: f64,
    random_return: f64,
    state_dim: usize,
    action_dim: usize,
}

fn encode_checkpoint(
    kind: CheckpointKind,
    config_hash: &str,
    meta: serde_json::Value,
    params: &[&[f64]],
    records: &[Transition],
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut count = 0;
    for block in params {
        for &p in *block {
            // parameters are stored at single precision
            payload.extend_from_slice(&(p as f32).to_le_bytes());
        }
        count += block.len();
    }
    encode_records(records, &mut payload);
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        version: FORMAT_VERSION,
        kind,
        config_hash: config_hash.into(),
        param_count: count,
        record_count: records.len(),
        payload_sha256: sha256_hex(&payload),
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

struct DecodedCheckpoint<'a> {
    header: CheckpointHeader,
    params: Vec<f64>,
    records: &'a [u8],
}

fn decode_checkpoint<'a>(
    bytes: &'a [u8],
    kind: CheckpointKind,
    expected_hash: Option<&str>,
    path: &Path,
) -> Result<DecodedCheckpoint<'a>> {
    let (line, payload) = split_header(bytes, path)?;
    let header: CheckpointHeader = parse_header(line, path)?;
    check_magic(&header.magic, header.version, CHECKPOINT_MAGIC, path)?;
    if header.kind != kind {
        return Err(format_err(path, format!("holds a {:?} checkpoint, expected {kind:?}", header.kind)));
    }
    if payload.len() < 4 * header.param_count {
        return Err(format_err(path, "truncated parameter block"));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(format_err(path, "payload checksum mismatch"));
    }
    check_hash(&header.config_hash, expected_hash, path)?;
    let (param_bytes, records) = payload.split_at(4 * header.param_count);
    let params = param_bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(DecodedCheckpoint {
        header,
        params,
        records,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MoanError::Missing(format!("{}: {e}", path.display())))
}

fn take_net(spec: &NetSpec, params: &[f64], offset: &mut usize, path: &Path) -> Result<Network> {
    let n = spec.param_count();
    if *offset + n > params.len() {
        return Err(format_err(path, "parameter block shorter than the declared networks"));
    }
    let net = Network::from_params(spec.clone(), params[*offset..*offset + n].to_vec())?;
    *offset += n;
    Ok(net)
}

fn finish(params: &[f64], offset: usize, path: &Path) -> Result<()> {
    if offset != params.len() {
        return Err(format_err(path, "parameter block longer than the declared networks"));
    }
    Ok(())
}

pub fn encode_model(ensemble: &DynamicsEnsemble, disc: &Discriminator, config_hash: &str) -> Result<Vec<u8>> {
    let first = ensemble
        .members
        .first()
        .ok_or_else(|| MoanError::Domain("cannot save an empty ensemble".into()))?;
    let meta = ModelMeta {
        state_dim: ensemble.state_dim,
        action_dim: ensemble.action_dim,
        member_spec: first.spec().clone(),
        disc_spec: disc.net.spec().clone(),
        ensemble_size: ensemble.len(),
        input_norm: ensemble.input_norm.clone(),
        output_norm: ensemble.output_norm.clone(),
    };
    let mut blocks: Vec<&[f64]> = ensemble.members.iter().map(|m| m.params()).collect();
    blocks.push(disc.net.params());
    encode_checkpoint(CheckpointKind::Model, config_hash, serde_json::to_value(meta)?, &blocks, &[])
}

pub fn decode_model(bytes: &[u8], expected_hash: Option<&str>, path: &Path) -> Result<(DynamicsEnsemble, Discriminator, String)> {
    let ck = decode_checkpoint(bytes, CheckpointKind::Model, expected_hash, path)?;
    if !ck.records.is_empty() {
        return Err(format_err(path, "unexpected trailing bytes"));
    }
    let meta: ModelMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| format_err(path, format!("bad model metadata: {e}")))?;
    let mut offset = 0;
    let mut members = Vec::with_capacity(meta.ensemble_size);
    for _ in 0..meta.ensemble_size {
        members.push(take_net(&meta.member_spec, &ck.params, &mut offset, path)?);
    }
    let disc_net = take_net(&meta.disc_spec, &ck.params, &mut offset, path)?;
    finish(&ck.params, offset, path)?;
    let ensemble = DynamicsEnsemble {
        members,
        input_norm: meta.input_norm.clone(),
        output_norm: meta.output_norm.clone(),
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
    };
    let disc = Discriminator {
        net: disc_net,
        input_norm: meta.input_norm,
        output_norm: meta.output_norm,
    };
    Ok((ensemble, disc, ck.header.config_hash))
}

pub fn save_model(path: &Path, ensemble: &DynamicsEnsemble, disc: &Discriminator, config_hash: &str) -> Result<()> {
    write_atomic(path, &encode_model(ensemble, disc, config_hash)?)
}

pub fn load_model(path: &Path, expected_hash: Option<&str>) -> Result<(DynamicsEnsemble, Discriminator, String)> {
    decode_model(&read_file(path)?, expected_hash, path)
}

pub fn encode_policy(policy: &SquashedGaussianPolicy, env_id: &str, config_hash: &str) -> Result<Vec<u8>> {
    let meta = PolicyMeta {
        env_id: env_id.into(),
        spec: policy.net.spec().clone(),
    };
    encode_checkpoint(
        CheckpointKind::Policy,
        config_hash,
        serde_json::to_value(meta)?,
        &[policy.net.params()],
        &[],
    )
}

/// Returns the policy, the environment id it was trained on and its config hash.
pub fn decode_policy(bytes: &[u8], expected_hash: Option<&str>, path: &Path) -> Result<(SquashedGaussianPolicy, String, String)> {
    let ck = decode_checkpoint(bytes, CheckpointKind::Policy, expected_hash, path)?;
    if !ck.records.is_empty() {
        return Err(format_err(path, "unexpected trailing bytes"));
    }
    let meta: PolicyMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| format_err(path, format!("bad policy metadata: {e}")))?;
    let mut offset = 0;
    let net = take_net(&meta.spec, &ck.params, &mut offset, path)?;
    finish(&ck.params, offset, path)?;
    Ok((SquashedGaussianPolicy { net }, meta.env_id, ck.header.config_hash))
}

pub fn save_policy(path: &Path, policy: &SquashedGaussianPolicy, env_id: &str, config_hash: &str) -> Result<()> {
    write_atomic(path, &encode_policy(policy, env_id, config_hash)?)
}

pub fn load_policy(path: &Path, expected_hash: Option<&str>) -> Result<(SquashedGaussianPolicy, String, String)> {
    decode_policy(&read_file(path)?, expected_hash, path)
}

pub fn encode_behavior(b: &crate::env::BehaviorArtifacts, config_hash: &str) -> Result<Vec<u8>> {
    if b.medium.net.spec() != b.expert.net.spec() {
        return Err(MoanError::Domain("medium and expert policies must share an architecture".into()));
    }
    let meta = BehaviorMeta {
        env_id: b.env_id.clone(),
        spec: b.medium.net.spec().clone(),
        medium_return: b.medium_return,
        expert_return: b.expert_return,
        random_return: b.random_return,
        state_dim: b.medium.state_dim(),
        action_dim: b.medium.action_dim(),
    };
    encode_checkpoint(
        CheckpointKind::Behavior,
        config_hash,
        serde_json::to_value(meta)?,
        &[b.medium.net.params(), b.expert.net.params()],
        &b.replay,
    )
}

pub fn decode_behavior(
    bytes: &[u8],
    expected_hash: Option<&str>,
    path: &Path,
) -> Result<(crate::env::BehaviorArtifacts, String)> {
    let ck = decode_checkpoint(bytes, CheckpointKind::Behavior, expected_hash, path)?;
    let meta: BehaviorMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| format_err(path, format!("bad behavior metadata: {e}")))?;
    let mut offset = 0;
    let medium = take_net(&meta.spec, &ck.params, &mut offset, path)?;
    let expert = take_net(&meta.spec, &ck.params, &mut offset, path)?;
    finish(&ck.params, offset, path)?;
    let replay = decode_records(ck.records, ck.header.record_count, meta.state_dim, meta.action_dim, path)?;
    Ok((
        crate::env::BehaviorArtifacts {
            env_id: meta.env_id,
            medium: SquashedGaussianPolicy { net: medium },
            expert: SquashedGaussianPolicy { net: expert },
            replay,
            medium_return: meta.medium_return,
            expert_return: meta.expert_return,
            random_return: meta.random_return,
        },
        ck.header.config_hash,
    ))
}

pub fn save_behavior(path: &Path, b: &crate::env::BehaviorArtifacts, config_hash: &str) -> Result<()> {
    write_atomic(path, &encode_behavior(b, config_hash)?)
}

pub fn load_behavior(path: &Path, expected_hash: Option<&str>) -> Result<(crate::env::BehaviorArtifacts, String)> {
    decode_behavior(&read_file(path)?, expected_hash, path)
}

/// Reads only the config hash from any artifact header.
pub fn artifact_config_hash(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Probe {
        config_hash: String,
    }
    let bytes = read_file(path)?;
    let (line, _) = split_header(&bytes, path)?;
    Ok(parse_header::<Probe>(line, path)?.config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::BehaviorTag;
    use crate::model::ModelTrainConfig;
    use crate::rng::seeded;
    use rand::Rng;

    fn toy_dataset(n: usize) -> TransitionDataset {
        let mut rng = seeded(5);
        let records = (0..n)
            .map(|i| Transition {
                s: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                a: vec![rng.random_range(-1.0..1.0)],
                s_next: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                r: rng.random_range(-1.0..1.0),
                done: i % 7 == 6,
                terminal: i % 14 == 13,
            })
            .collect();
        TransitionDataset::from_records("toy", 2, 1, BehaviorTag::Random, 3, records).unwrap()
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let ds = toy_dataset(50);
        let bytes = encode_dataset(&ds, "abc").unwrap();
        let (back, hash) = decode_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back, &hash).unwrap(), bytes);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(bytes.len() - header_len, 50 * record_size(2, 1));
    }

    #[test]
    fn damaged_datasets_are_refused() {
        let bytes = encode_dataset(&toy_dataset(20), "h").unwrap();
        let p = Path::new("mem");
        assert!(decode_dataset(&bytes[..bytes.len() - 3], p).is_err(), "truncated");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 0x40;
        assert!(decode_dataset(&flipped, p).is_err(), "checksum");
        let text = String::from_utf8_lossy(&bytes).replacen(DATASET_MAGIC, "MOAN-DATASEX", 1);
        assert!(decode_dataset(text.as_bytes(), p).is_err(), "magic");
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":9", 1);
        assert!(decode_dataset(text.as_bytes(), p).is_err(), "version");
    }

    #[test]
    fn model_checkpoint_round_trip_is_byte_identical() {
        let ds = toy_dataset(40);
        let (input, output) = crate::model::fit_normalizers(&ds);
        let cfg = ModelTrainConfig {
            ensemble_size: 3,
            hidden: vec![5],
            disc_hidden: vec![4],
            ..ModelTrainConfig::default()
        };
        let mut rng = seeded(1);
        let ens = DynamicsEnsemble::new(&cfg.member_spec(2, 1), 3, input.clone(), output.clone(), &mut rng).unwrap();
        let disc = Discriminator::new(cfg.disc_spec(2, 1), input, output, &mut rng).unwrap();
        let bytes = encode_model(&ens, &disc, "m1").unwrap();
        let p = Path::new("mem");
        let (e2, d2, h) = decode_model(&bytes, Some("m1"), p).unwrap();
        assert_eq!(encode_model(&e2, &d2, &h).unwrap(), bytes);
        for (a, b) in ens.members[2].params().iter().zip(e2.members[2].params()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(decode_model(&bytes, Some("other"), p).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 1], None, p).is_err());
        assert!(decode_policy(&bytes, None, p).is_err(), "kind mismatch");
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"2nd").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"2nd");
        assert!(!dir.path().join("sub").join("x.bin.tmp").exists());
    }
}
