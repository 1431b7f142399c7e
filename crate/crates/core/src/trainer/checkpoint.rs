//! Checkpoint files: a UTF-8 manifest followed by little-endian `f32`
//! parameter blobs in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::TrainError;
use crate::model::TwoTowerModel;
use crate::numerics::ParamId;

const MAGIC: &str = "tkgr-checkpoint 1";
const DATA_MARKER: &[u8] = b"\ndata\n";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub step: usize,
    pub tau: f64,
    /// Free-form `key=value` lines echoed from the run configuration.
    pub config: Vec<String>,
}

fn encoder_line(model: &TwoTowerModel) -> String {
    format!("{:?}", model.config)
}

pub fn save_checkpoint(path: &Path, model: &TwoTowerModel, step: usize, config: &[String]) -> Result<(), TrainError> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("step {step}\n"));
    header.push_str(&format!("tau {:e}\n", model.tau()));
    header.push_str(&format!("encoder {}\n", encoder_line(model)));
    for line in config {
        header.push_str(&format!("config {line}\n"));
    }
    header.push_str(&format!("params {}\n", model.store.len()));
    for (_, p) in model.store.iter() {
        let (r, c) = p.value().shape();
        header.push_str(&format!("{} {r} {c}\n", p.name()));
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for (_, p) in model.store.iter() {
        for &v in p.value().data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads parameter values into `model`, which must have been built with
/// the same encoder configuration.
pub fn load_checkpoint(path: &Path, model: &mut TwoTowerModel) -> Result<CheckpointInfo, TrainError> {
    let bytes = fs::read(path)?;
    let corrupt = |m: String| TrainError::CorruptCheckpoint(format!("{}: {m}", path.display()));
    let split = bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER)
        .ok_or_else(|| corrupt("missing data section".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("manifest is not UTF-8".into()))?;
    let blob = &bytes[split + DATA_MARKER.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("bad magic line".into()));
    }
    let mut field = |name: &str| -> Result<String, TrainError> {
        let line = lines.next().ok_or_else(|| corrupt(format!("missing {name}")))?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected {name}, found {line:?}")))
    };
    let step = field("step")?.parse().map_err(|_| corrupt("bad step".into()))?;
    let tau = field("tau")?.parse().map_err(|_| corrupt("bad tau".into()))?;
    if field("encoder")? != encoder_line(model) {
        return Err(corrupt("encoder configuration differs".into()));
    }
    let mut config = Vec::new();
    let count: usize = loop {
        let line = lines.next().ok_or_else(|| corrupt("missing params".into()))?;
        if let Some(c) = line.strip_prefix("config ") {
            config.push(c.to_string());
        } else if let Some(n) = line.strip_prefix("params ") {
            break n.parse().map_err(|_| corrupt("bad params count".into()))?;
        } else {
            return Err(corrupt(format!("unexpected manifest line {line:?}")));
        }
    };
    if count != model.store.len() {
        return Err(corrupt(format!("{count} parameters, model has {}", model.store.len())));
    }
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut expected = 0;
    for &id in &ids {
        let line = lines.next().ok_or_else(|| corrupt("truncated parameter list".into()))?;
        let p = model.store.get(id);
        let (r, c) = p.value().shape();
        if line != format!("{} {r} {c}", p.name()) {
            return Err(corrupt(format!("parameter {line:?} does not match {} {r}x{c}", p.name())));
        }
        expected += r * c;
    }
    if lines.next().is_some() {
        return Err(corrupt("trailing manifest lines".into()));
    }
    if blob.len() != expected * 4 {
        return Err(corrupt(format!("blob holds {} bytes, expected {}", blob.len(), expected * 4)));
    }
    let mut floats = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    for id in ids {
        for v in model.store.get_mut(id).value_mut().data_mut() {
            *v = floats.next().expect("length checked above");
        }
    }
    Ok(CheckpointInfo { step, tau, config })
}
