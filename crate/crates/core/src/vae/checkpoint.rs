use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Adam, Parameters, Scalar};
use crate::seeding::Rng;

use super::model::ModelParams;
use super::train::{TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

/// Position of a ChaCha stream. `word_pos` is a `u128`, kept as a decimal
/// string because JSON numbers cannot hold it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to resume training bit-exactly or to use the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub rng_state: RngState,
    pub table_speakers: Vec<u32>,
    pub params: Vec<NamedArray>,
    pub optimizer_step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from(x).unwrap()).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(trainer: &Trainer<T>) -> Self {
        let mut params = Vec::new();
        trainer.params.visit(&mut |b| {
            params.push(NamedArray {
                name: b.name,
                shape: b.shape,
                data: to_f64(b.data),
            })
        });
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: trainer.config.clone(),
            step: trainer.step,
            rng_state: RngState::capture(&trainer.noise_rng),
            table_speakers: trainer.params.table_speakers.clone(),
            params,
            optimizer_step: trainer.optimizer.step,
            first_moment: to_f64(&trainer.optimizer.first_moment),
            second_moment: to_f64(&trainer.optimizer.second_moment),
        }
    }

    /// Rebuilds model parameters, checking every block name and shape.
    pub fn model<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let mut model = ModelParams::<T>::init(self.config.dims.clone(), &self.table_speakers, 0)?;
        let layout = model.layout();
        if layout.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter blocks, model expects {}",
                self.params.len(),
                layout.len()
            )));
        }
        let mut flat = Vec::with_capacity(model.num_params());
        for ((name, shape), block) in layout.iter().zip(&self.params) {
            if *name != block.name || *shape != block.shape || block.data.len() != shape.0 * shape.1 {
                return Err(Error::Format(format!(
                    "parameter block `{}` {:?} does not match expected `{name}` {shape:?}",
                    block.name, block.shape
                )));
            }
            flat.extend(from_f64::<T>(&block.data));
        }
        model.set_flat(&flat)?;
        Ok(model)
    }

    pub fn trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        self.config.validate()?;
        let params = self.model::<T>()?;
        let n = params.num_params();
        if self.first_moment.len() != n || self.second_moment.len() != n {
            return Err(Error::Format(
                "optimizer moments do not match the parameter count".into(),
            ));
        }
        Ok(Trainer {
            config: self.config.clone(),
            params,
            optimizer: Adam {
                config: self.config.adam,
                step: self.optimizer_step,
                first_moment: from_f64(&self.first_moment),
                second_moment: from_f64(&self.second_moment),
            },
            step: self.step,
            noise_rng: self.rng_state.restore()?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
