//! Single-file checkpoints: a header line, a TOML manifest, then a blob of
//! little-endian `f64` tensors in manifest order.
//!
//! Layout:
//!
//! ```text
//! minifloat-qat checkpoint v1 manifest-bytes=<n>\n
//! <n bytes of TOML manifest>
//! <blob>
//! ```
//!
//! The manifest stores the SHA-256 of the blob and its length; loading
//! rejects any mismatch. Writes go to a temporary file in the target
//! directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::MinifloatFormat;
use crate::graph::ModelGraph;
use crate::optim::OptimState;
use crate::quant::QuantizerState;
use crate::train::{EpochRecord, Phase, Session};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "minifloat-qat checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantRecord {
    layer: String,
    role: String,
    format: String,
    e0: Option<f64>,
    learnable: bool,
    enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    phase: Phase,
    /// Epochs completed in the current phase.
    epoch: usize,
    optim_step: u64,
    optim_epoch: usize,
    /// Every random draw derives from this seed, the phase and the epoch.
    rng_seed: u64,
    blob_bytes: u64,
    blob_sha256: String,
    config: RunConfig,
    quantizers: Vec<QuantRecord>,
    tensors: Vec<TensorRecord>,
    history: Vec<EpochRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Named views of every persistent tensor, in blob order.
fn model_tensors(model: &ModelGraph) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (i, b) in model.blocks() {
        let name = &model.nodes[i].name;
        out.push((format!("{name}.weight"), b.weight.master.shape().to_vec(), b.weight.master.data()));
        out.push((format!("{name}.bias"), b.bias.master.shape().to_vec(), b.bias.master.data()));
        if let Some(bn) = &b.bn {
            let c = vec![bn.running_mean.len()];
            out.push((format!("{name}.bn.gamma"), c.clone(), bn.gamma.master.data()));
            out.push((format!("{name}.bn.beta"), c.clone(), bn.beta.master.data()));
            out.push((format!("{name}.bn.running_mean"), c.clone(), &bn.running_mean[..]));
            out.push((format!("{name}.bn.running_var"), c, &bn.running_var[..]));
        }
    }
    out
}

fn model_tensors_mut(model: &mut ModelGraph) -> Vec<(String, &mut [f64])> {
    let names: Vec<String> = model.nodes.iter().map(|n| n.name.clone()).collect();
    let mut out = Vec::new();
    for (i, b) in model.blocks_mut() {
        let name = &names[i];
        out.push((format!("{name}.weight"), b.weight.master.data_mut()));
        out.push((format!("{name}.bias"), b.bias.master.data_mut()));
        if let Some(bn) = &mut b.bn {
            out.push((format!("{name}.bn.gamma"), bn.gamma.master.data_mut()));
            out.push((format!("{name}.bn.beta"), bn.beta.master.data_mut()));
            out.push((format!("{name}.bn.running_mean"), &mut bn.running_mean[..]));
            out.push((format!("{name}.bn.running_var"), &mut bn.running_var[..]));
        }
    }
    out
}

fn quant_records(model: &ModelGraph) -> Vec<QuantRecord> {
    let mut out = Vec::new();
    for (i, b) in model.blocks() {
        let Some(att) = &b.quant else { continue };
        let rec = |role: &str, q: &QuantizerState| QuantRecord {
            layer: model.nodes[i].name.clone(),
            role: role.into(),
            format: q.format.to_string(),
            e0: q.e0,
            learnable: q.learnable,
            enabled: att.enabled,
        };
        out.push(rec("weight", &att.weight));
        if let Some(a) = &att.activation {
            out.push(rec("activation", a));
        }
    }
    out
}

/// Serializes a session to the checkpoint byte format.
pub fn encode_checkpoint(s: &Session) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorRecord { name, shape, offset: blob.len() as u64, count: data.len() as u64 });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, shape, data) in model_tensors(&s.model) {
        push(name, shape, data);
    }
    for (k, slot) in s.optim.first.iter().enumerate() {
        push(format!("optim.first.{k}"), vec![slot.len()], slot);
    }
    for (k, slot) in s.optim.second.iter().enumerate() {
        push(format!("optim.second.{k}"), vec![slot.len()], slot);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        phase: s.phase,
        epoch: s.epoch,
        optim_step: s.optim.step,
        optim_epoch: s.optim.epoch,
        rng_seed: s.config.seed,
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
        config: s.config.clone(),
        quantizers: quant_records(&s.model),
        tensors,
        history: s.history.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut out = format!("{MAGIC} v{CHECKPOINT_VERSION} manifest-bytes={}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Splits `<magic> v<version> manifest-bytes=<n>\n` from the rest.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &str, version: u32) -> Result<(&'a str, &'a [u8])> {
    let bad = |m: String| Error::Checkpoint(m);
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
    let rest = header.strip_prefix(magic).ok_or_else(|| bad(format!("not a {magic} file")))?;
    let mut parts = rest.split_whitespace();
    let v: u32 = parts
        .next()
        .and_then(|p| p.strip_prefix('v'))
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| bad("malformed version".into()))?;
    if v != version {
        return Err(bad(format!("version mismatch: file v{v}, supported v{version}")));
    }
    let n: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("manifest-bytes="))
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| bad("malformed manifest length".into()))?;
    let body = &bytes[nl + 1..];
    if body.len() < n {
        return Err(bad("checksum mismatch: file truncated inside manifest".into()));
    }
    let manifest = std::str::from_utf8(&body[..n]).map_err(|_| bad("manifest is not text".into()))?;
    Ok((manifest, &body[n..]))
}

fn read_f64s(blob: &[u8], rec: &TensorRecord) -> Result<Vec<f64>> {
    let start = rec.offset as usize;
    let end = start + rec.count as usize * 8;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the blob", rec.name)))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Rebuilds a session from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Session> {
    let (text, blob) = split_header(bytes, MAGIC, CHECKPOINT_VERSION)?;
    let m: Manifest = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {}", e.message())))?;
    if blob.len() as u64 != m.blob_bytes || sha256_hex(blob) != m.blob_sha256 {
        return Err(Error::Checkpoint("checksum mismatch: tensor data is corrupt or truncated".into()));
    }
    let config = m.config;
    let mut model = config.model.build(Some(config.quant.template()?), config.seed)?;
    model.ste = config.ste();
    let mut by_name: std::collections::HashMap<&str, &TensorRecord> =
        m.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, dst) in model_tensors_mut(&mut model) {
        let rec = by_name.remove(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if rec.count as usize != dst.len() {
            return Err(Error::Checkpoint(format!("tensor {name} has {} elements, model expects {}", rec.count, dst.len())));
        }
        dst.copy_from_slice(&read_f64s(blob, rec)?);
    }

    let mut records = m.quantizers.iter();
    let names: Vec<String> = model.nodes.iter().map(|n| n.name.clone()).collect();
    for (i, b) in model.blocks_mut() {
        let Some(att) = &mut b.quant else { continue };
        let mut roles: Vec<(&str, &mut QuantizerState)> = vec![("weight", &mut att.weight)];
        if let Some(a) = &mut att.activation {
            roles.push(("activation", a));
        }
        for (role, q) in roles {
            let rec = records.next().ok_or_else(|| Error::Checkpoint("missing quantizer records".into()))?;
            if rec.layer != names[i] || rec.role != role {
                return Err(Error::Checkpoint(format!("quantizer record {}/{} out of order", rec.layer, rec.role)));
            }
            q.format = rec.format.parse::<MinifloatFormat>()?;
            q.e0 = rec.e0;
            q.learnable = rec.learnable;
            att.enabled = rec.enabled;
        }
    }
    if records.next().is_some() {
        return Err(Error::Checkpoint("extra quantizer records".into()));
    }

    let mut optim = OptimState::new(config.optim);
    optim.step = m.optim_step;
    optim.epoch = m.optim_epoch;
    let mut slots = |prefix: &str| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        while let Some(rec) = by_name.remove(format!("{prefix}.{}", out.len()).as_str()) {
            out.push(read_f64s(blob, rec)?);
        }
        Ok(out)
    };
    optim.first = slots("optim.first")?;
    optim.second = slots("optim.second")?;
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(Session { config, phase: m.phase, model, optim, epoch: m.epoch, history: m.history })
}

/// Writes `bytes` to `path` via a temporary sibling and a rename, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save_checkpoint(s: &Session, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(s)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Session> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Checkpoint(format!("checkpoint not found: {}", path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
