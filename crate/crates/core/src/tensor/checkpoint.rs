//! Plain-text parameter checkpoints.
//!
//! ```text
//! mrf-checkpoint 1
//! sha256 <hex digest of everything after this line>
//! param <name> <dim>x<dim>...
//! <value> <value> ...
//! param ...
//! ```
//!
//! Values are written with Rust's shortest round-trip `f64` formatting, so a
//! save/load cycle reproduces every bit. Names may not contain whitespace.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "mrf-checkpoint 1";

pub fn write_checkpoint(store: &ParamStore) -> String {
    let mut body = String::new();
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.tensor().shape().iter().map(|d| d.to_string()).collect();
        writeln!(body, "param {} {}", p.name(), dims.join("x")).unwrap();
        let values: Vec<String> = p.tensor().data().iter().map(|v| v.to_string()).collect();
        writeln!(body, "{}", values.join(" ")).unwrap();
    }
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    format!("{MAGIC}\nsha256 {digest}\n{body}")
}

pub fn read_checkpoint(text: &str) -> Result<ParamStore> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut parts = text.splitn(3, '\n');
    if parts.next() != Some(MAGIC) {
        return Err(corrupt("missing header"));
    }
    let digest = parts
        .next()
        .and_then(|l| l.strip_prefix("sha256 "))
        .ok_or_else(|| corrupt("missing digest line"))?;
    let body = parts.next().unwrap_or("");
    if hex::encode(Sha256::digest(body.as_bytes())) != digest {
        return Err(corrupt("digest mismatch"));
    }

    let mut store = ParamStore::new();
    let mut lines = body.lines();
    while let Some(header) = lines.next() {
        let mut fields = header.split(' ');
        let (Some("param"), Some(name), Some(dims), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Checkpoint(format!(
                "malformed entry header `{header}`"
            )));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape for `{name}`")))?;
        let values = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing values for `{name}`")))?
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad value for `{name}`")))?;
        let tensor =
            Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        store
            .insert(name, tensor)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    for (_, p) in store.iter() {
        if p.name().chars().any(char::is_whitespace) || p.name().is_empty() {
            return Err(Error::contract(format!(
                "parameter name `{}` cannot be checkpointed",
                p.name()
            )));
        }
    }
    fs::write(path, write_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("not UTF-8".into()))?;
    read_checkpoint(&text)
}
