//! Versioned checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt        key = value lines, written last
//! <dir>/config.txt          run configuration the parameters belong to
//! <dir>/params.safetensors  every parameter, by dotted name
//! <dir>/optim.safetensors   optimizer moments (incomplete stages only)
//! ```
//!
//! Each file is written to a temporary name and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::nn::params::GROUPS;
use crate::nn::ParamStore;

pub const FORMAT: &str = "frdm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: u8,
    pub step: u64,
    pub complete: bool,
    /// Stages whose training finished, in order.
    pub stages_done: Vec<u8>,
    /// Frozen parameter groups per stage, as recorded by the trainer.
    pub frozen: BTreeMap<u8, String>,
}

impl Manifest {
    fn to_text(&self) -> String {
        let mut s = format!(
            "format = {FORMAT}\nversion = {VERSION}\nstage = {}\nstep = {}\ncomplete = {}\nstages_done = {}\ngroups = {}\n",
            self.stage,
            self.step,
            self.complete,
            self.stages_done.iter().map(u8::to_string).collect::<Vec<_>>().join(","),
            GROUPS.join(","),
        );
        for (stage, frozen) in &self.frozen {
            s.push_str(&format!("frozen.stage{stage} = {frozen}\n"));
        }
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptDataset { path: path.to_path_buf(), reason };
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad manifest line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        if kv.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(corrupt("not a checkpoint manifest".into()));
        }
        let version: u32 = kv.get("version").and_then(|v| v.parse().ok()).ok_or_else(|| corrupt("missing version".into()))?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let num = |k: &str| -> Result<u64> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| corrupt(format!("missing or bad {k}")))
        };
        let stages_done = match kv.get("stages_done").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(v) => v.split(',').map(|s| s.parse().map_err(|_| corrupt(format!("bad stage list {v}")))).collect::<Result<_>>()?,
        };
        let frozen = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("frozen.stage").and_then(|s| s.parse().ok()).map(|s: u8| (s, v.clone())))
            .collect();
        Ok(Self {
            stage: num("stage")? as u8,
            step: num("step")?,
            complete: kv.get("complete").map(String::as_str) == Some("true"),
            stages_done,
            frozen,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    candle_core::safetensors::save(tensors, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn stage_dir(root: &Path, stage: u8) -> PathBuf {
    root.join(format!("stage{stage}"))
}

pub fn save(
    dir: &Path,
    store: &ParamStore,
    cfg: &RunConfig,
    manifest: &Manifest,
    optim: Option<&HashMap<String, Tensor>>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params: HashMap<String, Tensor> = store.all().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
    save_tensors(&dir.join("params.safetensors"), &params)?;
    let optim_path = dir.join("optim.safetensors");
    match optim {
        Some(state) => save_tensors(&optim_path, state)?,
        None if optim_path.exists() => std::fs::remove_file(&optim_path)?,
        None => {}
    }
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    write_atomic(&dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::CorruptDataset { path: path.clone(), reason: e.to_string() })?;
    Manifest::parse(&text, &path)
}

pub struct Loaded {
    pub manifest: Manifest,
    pub config: RunConfig,
    pub optim: Option<HashMap<String, Tensor>>,
}

/// Loads parameters into `store` and returns the manifest, stored config and
/// optimizer state. Missing or unreadable checkpoints are configuration errors.
pub fn load(dir: &Path, store: &ParamStore) -> Result<Loaded> {
    if !dir.join("manifest.txt").exists() {
        return Err(config_err!("no checkpoint at {}", dir.display()));
    }
    let manifest = read_manifest(dir).map_err(|e| config_err!("unreadable checkpoint {}: {e}", dir.display()))?;
    let config = RunConfig::from_file(&dir.join("config.txt"))?;
    let params = candle_core::safetensors::load(dir.join("params.safetensors"), &Device::Cpu)
        .map_err(|e| config_err!("unreadable parameters in {}: {e}", dir.display()))?;
    let mut names: Vec<&String> = params.keys().collect();
    names.sort();
    for name in names {
        store.insert(name, &params[name])?;
    }
    let optim_path = dir.join("optim.safetensors");
    let optim = if optim_path.exists() { Some(candle_core::safetensors::load(&optim_path, store.device())?) } else { None };
    Ok(Loaded { manifest, config, optim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParamStore::new(5, Device::Cpu, DType::F32);
        let w = store.builder("unet_base.a").get((3, 2), "w", Init::Normal(1.0)).unwrap();
        let mut frozen = BTreeMap::new();
        frozen.insert(2u8, "autoencoder,unet_base,preprocess,temporal".to_string());
        let m = Manifest { stage: 2, step: 17, complete: false, stages_done: vec![0, 1], frozen };
        save(dir.path(), &store, &RunConfig::default(), &m, None).unwrap();
        let other = ParamStore::new(99, Device::Cpu, DType::F32);
        let loaded = load(dir.path(), &other).unwrap();
        assert_eq!(loaded.manifest, m);
        assert_eq!(loaded.config, RunConfig::default());
        let got = other.get("unet_base.a.w").unwrap();
        assert_eq!(got.as_tensor().to_vec2::<f32>().unwrap(), w.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn missing_checkpoint_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParamStore::new(0, Device::Cpu, DType::F32);
        assert!(matches!(load(&dir.path().join("nope"), &store), Err(Error::Config(_))));
    }
}
