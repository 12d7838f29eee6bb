//! Training checkpoints: a directory with `checkpoint.json` (configuration,
//! class table, completed stages, RNG state) and `params.safetensors` (every
//! trainable tensor plus cached anchors).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::checkpoint::{read_safetensors, write_safetensors};
use crate::config::{RunConfig, Stage};
use crate::data::ClassTable;
use crate::error::{Error, Result};
use crate::model::{build_backbone, Model};
use crate::prompt::AnchorSet;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_FILE: &str = "checkpoint.json";
const PARAMS_FILE: &str = "params.safetensors";
const ANCHORS: &str = "anchors";
const INITIAL_ANCHORS: &str = "anchors.initial";

/// A trained (or partially trained) model with what is needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub completed_stages: Vec<Stage>,
    pub rng: ChaCha8Rng,
    pub pixel_threshold: Option<f64>,
    pub initial_anchors: Option<AnchorSet>,
}

impl Checkpoint {
    /// Fails unless the checkpoint was trained on exactly `expected`.
    pub fn check_classes(&self, expected: &ClassTable) -> Result<()> {
        if &self.model.classes != expected {
            let names = |t: &ClassTable| t.iter().map(|c| c.name.clone()).collect::<Vec<_>>().join(", ");
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes [{}], expected {} [{}]",
                self.model.classes.len(),
                names(&self.model.classes),
                expected.len(),
                names(expected)
            )));
        }
        Ok(())
    }

    pub fn pixel_threshold(&self) -> f64 {
        self.pixel_threshold.unwrap_or(0.5)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: RunConfig,
    classes: ClassTable,
    completed_stages: Vec<Stage>,
    rng: ChaCha8Rng,
    pixel_threshold: Option<f64>,
    backbone_checksum: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(ck: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &ck.model;
    let meta = Meta {
        format_version: CHECKPOINT_VERSION,
        config: m.config.clone(),
        classes: m.classes.clone(),
        completed_stages: ck.completed_stages.clone(),
        rng: ck.rng.clone(),
        pixel_threshold: ck.pixel_threshold,
        backbone_checksum: m.backbone.checksum(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| bad(e.to_string()))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    let mut entries: Vec<(String, Vec<usize>, Arc<Tensor>)> = m
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.shape().to_vec(), Arc::clone(&e.value)))
        .collect();
    for (name, a) in [(ANCHORS, m.anchors()), (INITIAL_ANCHORS, ck.initial_anchors.as_ref())] {
        if let Some(a) = a {
            entries.push((name.into(), a.anchors.shape().to_vec(), Arc::new(a.anchors.clone())));
        }
    }
    let groups: HashMap<String, String> = m
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.group.name().to_string()))
        .collect();
    write_safetensors(&dir.join(PARAMS_FILE), entries, Some(groups))
}

/// Loads a checkpoint, rebuilding the backbone from its configuration and
/// verifying the backbone weights are the ones it was trained on.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.format_version
        )));
    }
    let backbone = build_backbone(&meta.config.backbone, meta.config.model.input_size)?;
    if backbone.checksum() != meta.backbone_checksum {
        return Err(bad("backbone weights differ from the ones this checkpoint was trained on"));
    }
    let mut model = Model::new(Arc::new(backbone), &meta.config)?;
    if model.classes != meta.classes {
        return Err(bad("class table disagrees with the stored configuration"));
    }
    let (tensors, _) = read_safetensors(&dir.join(PARAMS_FILE))?;
    let mut tensors: HashMap<String, Tensor> = tensors.into_iter().collect();
    let names: Vec<String> = model.store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
        model.store.set(&name, t)?;
    }
    let k = model.class_count();
    let take_anchors = |t: Option<Tensor>| -> Result<Option<AnchorSet>> {
        match t {
            Some(a) if a.nrows() != k => Err(bad(format!("cached anchors have {} rows, expected {k}", a.nrows()))),
            other => Ok(other.map(AnchorSet::new)),
        }
    };
    let anchors = take_anchors(tensors.remove(ANCHORS))?;
    let initial_anchors = take_anchors(tensors.remove(INITIAL_ANCHORS))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }
    model.set_anchors(anchors);
    Ok(Checkpoint {
        model,
        completed_stages: meta.completed_stages,
        rng: meta.rng,
        pixel_threshold: meta.pixel_threshold,
        initial_anchors,
    })
}
