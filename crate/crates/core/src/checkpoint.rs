//! Checkpoints: one MSAT file per parameter, a `name<TAB>path` manifest and
//! the training config.

use std::fmt::Write as _;
use std::path::Path;

use vidseg_tensor::{msat, AnyTensor};

use crate::config::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::model::Msaf;
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

pub fn save(dir: &Path, cfg: &TrainConfig, store: &ParamStore<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for id in store.ids() {
        let name = store.name(id);
        let file = format!("{name}.msat");
        msat::write(dir.join(&file), &AnyTensor::from(store.get(id).clone()))?;
        writeln!(manifest, "{name}\t{file}").expect("string write");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    let path = dir.join(CONFIG);
    std::fs::write(&path, cfg.to_text()).map_err(io_err(&path))?;
    Ok(())
}

/// Rebuilds the model from the stored config and loads every parameter.
pub fn load(dir: &Path) -> Result<(TrainConfig, Msaf, ParamStore<f32>)> {
    let path = dir.join(CONFIG);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let cfg = TrainConfig::parse(&text)?;
    let (model, mut store) = Msaf::new::<f32>(cfg.model, cfg.seed)?;
    let path = dir.join(MANIFEST);
    let manifest = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut seen = vec![false; store.len()];
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected name<TAB>path", i + 1)))?;
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        let tensor = match msat::read(dir.join(file))? {
            AnyTensor::F32(t) => t,
            other => return Err(Error::Checkpoint(format!("{file}: expected f32, got {:?}", other.dtype()))),
        };
        store
            .set(id, tensor)
            .map_err(|e| Error::Checkpoint(format!("{file}: {e}")))?;
        seen[id.index()] = true;
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Checkpoint(format!("parameter {} missing from manifest", store.name(missing))));
    }
    Ok((cfg, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidseg_tensor::Tensor;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.set("widths", "4,4,8,8,8").unwrap();
        cfg
    }

    #[test]
    fn round_trip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (_, mut store) = Msaf::new::<f32>(cfg.model, cfg.seed).unwrap();
        let id = store.ids().next().unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::full(&shape, 0.25)).unwrap();
        save(dir.path(), &cfg, &store).unwrap();
        let (back_cfg, _, back) = load(dir.path()).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.values(), store.values());
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), store.len());
        assert!(manifest.starts_with("backbone.s1.0.w\tbackbone.s1.0.w.msat\n"));
    }

    #[test]
    fn broken_manifests_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (_, store) = Msaf::new::<f32>(cfg.model, cfg.seed).unwrap();
        save(dir.path(), &cfg, &store).unwrap();
        let path = dir.path().join(MANIFEST);
        let full = std::fs::read_to_string(&path).unwrap();

        let first_line_dropped: String = full.lines().skip(1).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, first_line_dropped).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        std::fs::write(&path, format!("{full}bogus\tbogus.msat\n")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        std::fs::write(&path, "no tab here\n").unwrap();
        assert!(load(dir.path()).unwrap_err().is_format());
    }
}
