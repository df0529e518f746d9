//! Checkpoint directories: one MTSV file per named tensor plus a plain-text
//! manifest holding the model spec and every tensor's extents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::{Module, StateKind};
use crate::tensor::{io, Scalar};

pub const MANIFEST: &str = "manifest.txt";
const TENSOR_PREFIX: &str = "tensor.";

fn file_name(name: &str) -> String {
    format!("{name}.mtsv")
}

fn extents(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `model` into `dir`, creating it if needed. The output depends only
/// on the model state, so equal models give byte-identical directories.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("# model checkpoint\n");
    for (k, v) in model.spec.to_pairs() {
        writeln!(manifest, "{k} = {v}").unwrap();
    }
    let mut failure = None;
    model.for_each("", &mut |name, _, t| {
        writeln!(manifest, "{TENSOR_PREFIX}{name} = {}", extents(t.dims())).unwrap();
        if failure.is_none() {
            failure = io::save(t, dir.join(file_name(name))).err();
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Spec and tensor extents recorded in a checkpoint manifest.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<(ModelSpec, BTreeMap<String, Vec<usize>>)> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut pairs = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected key = value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if let Some(name) = k.strip_prefix(TENSOR_PREFIX) {
            let dims = v
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("manifest line {}: bad extents {v:?}", no + 1)))?;
            tensors.insert(name.to_string(), dims);
        } else {
            pairs.insert(k.to_string(), v.to_string());
        }
    }
    let spec = ModelSpec::from_pairs(&pairs).map_err(|e| Error::Checkpoint(format!("manifest spec: {e}")))?;
    Ok((spec, tensors))
}

impl<T: Scalar> Model<T> {
    /// Replaces every parameter and buffer with the checkpoint's values.
    /// Fails without modifying the model when the checkpoint was written
    /// for a different architecture.
    pub fn load_state(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let (spec, tensors) = read_manifest(dir)?;
        if spec != self.spec {
            let ours: BTreeMap<_, _> = self.spec.to_pairs().into_iter().collect();
            let diff: Vec<String> = spec
                .to_pairs()
                .into_iter()
                .filter(|(k, v)| ours.get(k) != Some(v))
                .map(|(k, v)| format!("{k}: checkpoint {v}, model {}", ours.get(&k).map_or("-", |s| s.as_str())))
                .collect();
            return Err(Error::Checkpoint(format!("spec differs ({})", diff.join("; "))));
        }
        let mut expected = BTreeMap::new();
        self.for_each("", &mut |name, _, t| {
            expected.insert(name.to_string(), t.dims().to_vec());
        });
        if expected != tensors {
            let missing: Vec<_> = expected.keys().filter(|k| !tensors.contains_key(*k)).cloned().collect();
            let extra: Vec<_> = tensors.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
            let resized: Vec<_> = expected
                .iter()
                .filter(|(k, d)| tensors.get(*k).is_some_and(|c| c != *d))
                .map(|(k, d)| format!("{k} {} vs {}", extents(&tensors[k]), extents(d)))
                .collect();
            return Err(Error::Checkpoint(format!(
                "tensor set differs: missing {missing:?}, unexpected {extra:?}, resized {resized:?}"
            )));
        }
        let mut loaded = BTreeMap::new();
        for (name, dims) in &tensors {
            let t = io::load::<T>(dir.join(file_name(name))).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: file holds {:?}, manifest says {dims:?}", t.dims())));
            }
            loaded.insert(name.clone(), t);
        }
        self.for_each_mut("", &mut |name, kind, t| {
            let mut v = loaded.remove(name).expect("tensor set checked above");
            if kind == StateKind::Param {
                v.set_requires_grad(true);
            }
            *t = v;
        });
        Ok(())
    }
}

/// Rebuilds the model described by a checkpoint and loads its state.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let (spec, _) = read_manifest(dir.as_ref())?;
    let mut model = Model::build(&spec, 0)?;
    model.load_state(dir)?;
    Ok(model)
}
