//! Checkpoint directories: `meta.json` plus one MGT1 file per parameter and
//! per Adam moment buffer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numcore::{io as mgt, MomentState, RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{config_diff, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;

const FORMAT: &str = "magnifier-checkpoint-1";

/// Position of a run, enough to continue it bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Index of the epoch in progress (equal to the epoch count when done).
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub epoch_step: usize,
    pub occlusion_rng: RngState,
    /// Running loss sums of the current epoch: cls, tri, sd, mask, total.
    pub epoch_sums: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: String,
    config: TrainConfig,
    config_hash: String,
    num_classes: usize,
    image_size: (usize, usize),
    state: TrainState,
    optimizer_steps: BTreeMap<String, u64>,
}

fn file_name(name: &str) -> String {
    format!("{name}.mgt")
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, mgt::encode(t)).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mgt::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn save(dir: &Path, model: &Model<f32>, state: &TrainState) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for sub in ["params", "optim"] {
        let p = tmp.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut optimizer_steps = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let plain = Tensor::new(t.shape(), t.data().to_vec())?;
        write_tensor(&tmp.join("params").join(file_name(name)), &plain)?;
        if t.requires_grad {
            let st = model.params.state(name)?;
            write_tensor(&tmp.join("optim").join(file_name(&format!("{name}.m"))), &Tensor::new(t.shape(), st.m.clone())?)?;
            write_tensor(&tmp.join("optim").join(file_name(&format!("{name}.v"))), &Tensor::new(t.shape(), st.v.clone())?)?;
            optimizer_steps.insert(name.to_string(), st.step);
        }
    }
    let meta = Meta {
        format: FORMAT.into(),
        config: model.config.clone(),
        config_hash: model.config.hash(),
        num_classes: model.num_classes,
        image_size: model.image_size,
        state: state.clone(),
        optimizer_steps,
    };
    let p = tmp.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&p, e))?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Loads a checkpoint, rebuilding the model from its stored configuration.
pub fn load(dir: &Path) -> Result<(Model<f32>, TrainState)> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", meta.format)));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Checkpoint("stored configuration does not match its recorded hash".into()));
    }
    let (h, w) = meta.image_size;
    let mut model = Model::<f32>::new(&meta.config, meta.num_classes, h, w)?;
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let t = read_tensor(&dir.join("params").join(file_name(&name)))?;
        model.params.set_values(&name, &t)?;
        if let Some(&step) = meta.optimizer_steps.get(&name) {
            let m = read_tensor(&dir.join("optim").join(file_name(&format!("{name}.m"))))?;
            let v = read_tensor(&dir.join("optim").join(file_name(&format!("{name}.v"))))?;
            model.params.set_state(
                &name,
                MomentState {
                    m: m.into_data(),
                    v: v.into_data(),
                    step,
                },
            )?;
        }
    }
    Ok((model, meta.state))
}

/// Loads a checkpoint to continue training under `config`, refusing when
/// the configurations differ.
pub fn load_for_resume(dir: &Path, config: &TrainConfig) -> Result<(Model<f32>, TrainState)> {
    let (model, state) = load(dir)?;
    if model.config.hash() != config.hash() {
        return Err(Error::ConfigMismatch(config_diff(&model.config.to_value(), &config.to_value())));
    }
    Ok((model, state))
}
