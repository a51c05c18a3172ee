//! Checkpoint directories: one container file per named tensor plus a
//! `manifest.json` holding the architecture and scalar metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Backbone};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub arch: ArchSpec,
    /// Backbone tensors in weight order.
    pub weights: Vec<String>,
    /// Additional named tensors (adapter, head).
    pub extra: Vec<String>,
    pub info: BTreeMap<String, f64>,
}

fn file_name(name: &str) -> String {
    format!("{name}.sokt")
}

/// Writes `model` and `extra` tensors under `dir`, replacing any previous files.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Backbone,
    extra: &[(String, Tensor)],
    info: BTreeMap<String, f64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = model.names();
    for (name, w) in names.iter().zip(&model.weights) {
        save_tensor(dir.join(file_name(name)), w)?;
    }
    for (name, t) in extra {
        save_tensor(dir.join(file_name(name)), t)?;
    }
    let manifest = Manifest {
        arch: model.spec.clone(),
        weights: names,
        extra: extra.iter().map(|(n, _)| n.clone()).collect(),
        info,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))
}

pub fn load_backbone(dir: impl AsRef<Path>) -> Result<Backbone> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.arch.validate()?;
    let weights = manifest
        .weights
        .iter()
        .map(|n| load_tensor(dir.join(file_name(n))))
        .collect::<Result<Vec<_>>>()?;
    let model = Backbone {
        spec: manifest.arch,
        weights,
    };
    let expect = model.names();
    if expect != manifest.weights {
        return Err(Error::InvalidDataset(format!(
            "{}: weight names do not match the architecture",
            dir.display()
        )));
    }
    Ok(model)
}

pub fn load_extra(dir: impl AsRef<Path>, name: &str) -> Result<Tensor> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if !manifest.extra.iter().any(|n| n == name) {
        return Err(Error::InvalidDataset(format!("{}: no tensor named {name}", dir.display())));
    }
    load_tensor(dir.join(file_name(name)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_backbone;
    use crate::rng::Rng;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_backbone(&ArchSpec::student_default(), &mut Rng::new(4, 0)).unwrap();
        let extra = vec![("adapter.weight".to_string(), Tensor::ones(&[2, 2, 1, 1]).unwrap())];
        let info = BTreeMap::from([("test_top1".to_string(), 0.5)]);
        save_checkpoint(dir.path(), &m, &extra, info.clone()).unwrap();
        assert_eq!(load_backbone(dir.path()).unwrap(), m);
        assert_eq!(load_extra(dir.path(), "adapter.weight").unwrap(), extra[0].1);
        assert!(load_extra(dir.path(), "nope").is_err());
        assert_eq!(read_manifest(dir.path()).unwrap().info, info);
    }

    #[test]
    fn missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_backbone(dir.path()), Err(Error::MissingCheckpoint(_))));
    }
}
