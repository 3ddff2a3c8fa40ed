//! Model files: a `key=value` text header, a `---` line, then the tensor container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, NetworkConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{read_tensors, write_tensors};

const MAGIC_LINE: &str = "maccif-model v1";
const SEPARATOR: &[u8] = b"\n---\n";

/// SHA-256 over every stored tensor's name and shape.
pub fn topology_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for t in params.to_named() {
        h.update(t.name.as_bytes());
        for d in t.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parsed header of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeader {
    pub topology_hash: String,
    pub seed: u64,
    pub iteration: u64,
    /// Every `key=value` line, including network and run settings.
    pub values: BTreeMap<String, String>,
}

/// Writes the model with its config, seed, iteration and any extra echo lines.
pub fn save_model(path: &Path, model: &Model, iteration: u64, echo: &[(String, String)]) -> Result<()> {
    let mut text = format!(
        "{MAGIC_LINE}\ntopology_hash={}\nseed={}\niteration={iteration}\n",
        topology_hash(&model.params),
        model.seed
    );
    let mut written: Vec<String> = ["topology_hash", "seed", "iteration"].map(String::from).to_vec();
    let network = model.config.entries().into_iter().map(|(k, v)| (k.to_string(), v));
    for (k, v) in network.chain(echo.iter().cloned()) {
        if !written.contains(&k) {
            text.push_str(&format!("{k}={v}\n"));
            written.push(k);
        }
    }
    let mut bytes = text.trim_end_matches('\n').as_bytes().to_vec();
    bytes.extend_from_slice(SEPARATOR);
    write_tensors(&mut bytes, &model.params.to_named())?;
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_header(text: &str, path: &Path) -> Result<ModelHeader> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC_LINE) {
        return Err(bad("not a model file".into()));
    }
    let mut values = BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line '{line}'")))?;
        values.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| values.get(k).ok_or_else(|| bad(format!("header lacks {k}")));
    let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("bad {k}")));
    Ok(ModelHeader {
        topology_hash: get("topology_hash")?.clone(),
        seed: num("seed")?,
        iteration: num("iteration")?,
        values,
    })
}

/// Rebuilds the model from its header and restores every tensor.
pub fn load_model(path: &Path) -> Result<(Model, ModelHeader)> {
    let bytes = fs::read(path)?;
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Format(format!("{}: missing header separator", path.display())))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format(format!("{}: header is not UTF-8", path.display())))?;
    let header = parse_header(text, path)?;
    let mut config = NetworkConfig::large();
    for key in NetworkConfig::KEYS {
        let v = header
            .values
            .get(key)
            .ok_or_else(|| Error::Format(format!("{}: header lacks {key}", path.display())))?;
        config.set(key, v)?;
    }
    let mut model = Model::new(config, header.seed)?;
    if topology_hash(&model.params) != header.topology_hash {
        return Err(Error::Format(format!("{}: topology hash mismatch", path.display())));
    }
    let tensors = read_tensors(&bytes[split + SEPARATOR.len()..])?;
    model.params.load_named(&tensors)?;
    Ok((model, header))
}
