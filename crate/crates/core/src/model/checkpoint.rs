//! Checkpoints: a plain-text manifest naming every parameter with its shape
//! and byte offset, next to a raw little-endian `f32` data file.
//!
//! ```text
//! stackformer-checkpoint 1
//! data run.bin
//! config layers=2
//! vocab a b
//! meta seed=7
//! param embed 6x32 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Model, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "stackformer-checkpoint 1";

pub struct Checkpoint {
    pub model: Model,
    /// Free-form `key=value` metadata stored alongside the model.
    pub meta: Vec<(String, String)>,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `manifest` and a sibling `.bin` file.
pub fn save_checkpoint(model: &Model, manifest: &Path, meta: &[(String, String)]) -> Result<()> {
    let data = data_path(manifest);
    let mut text = format!("{MAGIC}\n");
    text += &format!(
        "data {}\n",
        data.file_name().and_then(|n| n.to_str()).ok_or_else(|| bad("data path is not UTF-8"))?
    );
    for (k, v) in model.config().to_pairs() {
        text += &format!("config {k}={v}\n");
    }
    text += &format!("vocab {}\n", model.vocab().sigma_symbols().join(" "));
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(bad(format!("metadata entry {k:?} is not a single key=value line")));
        }
        text += &format!("meta {k}={v}\n");
    }
    let mut bytes = Vec::with_capacity(model.params().numel() * 4);
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text += &format!("param {name} {} {}\n", shape.join("x"), bytes.len());
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(&data, bytes)?;
    fs::write(manifest, text)?;
    Ok(())
}

pub fn load_checkpoint(manifest: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(manifest)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("{} is not a checkpoint manifest", manifest.display())));
    }
    let mut config = ModelConfig::desk();
    let mut vocab = None;
    let mut data_file = None;
    let mut meta = Vec::new();
    let mut params = Vec::new();
    for (no, line) in lines.enumerate() {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "data" => data_file = Some(rest.to_string()),
            "config" => {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("line {}: bad config", no + 2)))?;
                if !config.set(k, v)? {
                    return Err(bad(format!("unknown config key {k:?}")));
                }
            }
            "vocab" => vocab = Some(Vocabulary::new(&rest.split_whitespace().collect::<Vec<_>>())?),
            "meta" => {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("line {}: bad meta", no + 2)))?;
                meta.push((k.to_string(), v.to_string()));
            }
            "param" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("line {}: expected name, shape, offset", no + 2)));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("line {}: bad shape {:?}", no + 2, f[1])))?;
                let offset: usize = f[2].parse().map_err(|_| bad(format!("line {}: bad offset", no + 2)))?;
                params.push((f[0].to_string(), shape, offset));
            }
            "" => {}
            other => return Err(bad(format!("line {}: unknown entry {other:?}", no + 2))),
        }
    }
    let vocab = vocab.ok_or_else(|| bad("missing vocab line"))?;
    let data_file = data_file.ok_or_else(|| bad("missing data line"))?;
    let bytes = fs::read(manifest.with_file_name(&data_file))?;

    let mut model = Model::new(config, vocab, 0)?;
    let mut store = model.params().clone();
    if params.len() != store.len() {
        return Err(bad(format!("manifest lists {} parameters, model has {}", params.len(), store.len())));
    }
    let mut seen = vec![false; store.len()];
    for (name, shape, offset) in params {
        let pos = store.position(&name).ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
        if std::mem::replace(&mut seen[pos], true) {
            return Err(bad(format!("{name} listed twice")));
        }
        let slot = &mut store.tensors_mut()[pos];
        if slot.shape() != shape.as_slice() {
            return Err(bad(format!("{name}: shape {shape:?} does not match {:?}", slot.shape())));
        }
        let end = offset + slot.numel() * 4;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| bad(format!("{name}: bytes {offset}..{end} beyond data file")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *slot = Tensor::new(shape, values)?;
    }
    model.load_params(store)?;
    Ok(Checkpoint { model, meta })
}
