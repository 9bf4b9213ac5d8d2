//! Model files: a binary parameter file plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkHeader, ModelConfig};
use super::train::{History, TrainedModel, TrainingKind};
use crate::cohort::WindowSpec;
use crate::error::{Error, Result};
use crate::nnet::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub kind: TrainingKind,
    pub spec: Option<WindowSpec>,
    pub params_file: String,
    pub network: NetworkHeader,
    pub config: ModelConfig,
    pub history: History,
}

pub fn params_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn save_model(dir: impl AsRef<Path>, name: &str, model: &TrainedModel) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = model.net.header();
    io::save(params_path(dir, name), &serde_json::to_string(&header)?, &model.net)?;
    let manifest = Manifest {
        name: name.to_string(),
        kind: model.kind,
        spec: model.spec,
        params_file: format!("{name}.bin"),
        network: header,
        config: model.config.clone(),
        history: model.history.clone(),
    };
    let path = manifest_path(dir, name);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = io::read(path)?;
    let header: NetworkHeader = serde_json::from_str(&file.header)?;
    let mut net = Network::from_header(&header)?;
    file.fill(&mut net)?;
    Ok(net)
}

pub fn load_model(dir: impl AsRef<Path>, name: &str) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let mpath = manifest_path(dir, name);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let net = load_network(dir.join(&manifest.params_file))?;
    if net.header() != manifest.network {
        return Err(Error::invalid(format!("{} disagrees with its parameter file", mpath.display())));
    }
    Ok(TrainedModel {
        net,
        kind: manifest.kind,
        spec: manifest.spec,
        config: manifest.config,
        history: manifest.history,
    })
}
