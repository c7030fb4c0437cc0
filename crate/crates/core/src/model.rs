//! Scene encoder and language model wired together, plus on-disk model
//! directories (`model.json`, `vocab.txt`, `model.ckpt`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::checkpoint::{self, DType, NamedTensor};
use crate::error::{Error, Result};
use crate::language_model::{assemble_layout, LanguageModel, LmConfig, TokenSequence, Vocab};
use crate::params::{Group, ParamStore};
use crate::pointcloud::{ObjectCloud, Scene};
use crate::scene_encoder::{EncoderConfig, SceneEncoder, SceneInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
}


impl ModelConfig {
    /// A small configuration for tests and quick synthetic runs.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                d_obj: 32,
                n_layers: 1,
                n_heads: 4,
                d_llm: 48,
                frozen_point_encoder: true,
            },
            lm: LmConfig {
                vocab_size: 0,
                d_model: 48,
                n_layers: 2,
                n_heads: 4,
                max_len: 128,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        if self.encoder.d_llm != self.lm.d_model {
            return Err(Error::Config(format!(
                "connector width {} differs from language model width {}",
                self.encoder.d_llm, self.lm.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: SceneEncoder,
    pub lm: LanguageModel,
    pub vocab: Vocab,
}

impl Model {
    /// Fresh model; `config.lm.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<(Model, ParamStore)> {
        config.lm.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SceneEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let lm = LanguageModel::new(config.lm.clone(), &vocab, &mut store, &mut rng)?;
        Ok((
            Model {
                config,
                encoder,
                lm,
                vocab,
            },
            store,
        ))
    }

    /// Encoder input for a scene, optionally narrowed to one object.
    pub fn scene_input(&self, store: &ParamStore, scene: &Scene, object_id: Option<u32>) -> Result<SceneInput> {
        let objects: Vec<ObjectCloud> = match object_id {
            None => scene.objects().to_vec(),
            Some(id) => vec![scene
                .objects()
                .iter()
                .find(|o| o.object_id == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("scene {} has no object {id}", scene.scene_id)))?],
        };
        self.encoder
            .prepare(store, objects, self.config.encoder.frozen_point_encoder)
    }

    /// Connector outputs for a scene on the tape.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, scene: &SceneInput) -> Result<Var> {
        self.encoder.encode_scene(tape, store, scene)
    }

    pub fn layout(&self, system: &str, n_objects: usize, instruction: &str, response: Option<&str>) -> Result<TokenSequence> {
        assemble_layout(system, n_objects, instruction, response, &self.vocab, self.config.lm.max_len)
    }

    /// Average response log-probability without gradients.
    pub fn score(&self, store: &ParamStore, scene: &SceneInput, seq: &TokenSequence) -> Result<f64> {
        let mut tape = Tape::with_frozen(&Group::ALL);
        let inj = self.encode(&mut tape, store, scene)?;
        let v = self.lm.response_logprob_on(&mut tape, store, seq, Some(inj))?;
        Ok(tape.scalar(v))
    }

    pub fn point_tokens(&self, store: &ParamStore, scene: &SceneInput) -> Result<Matrix> {
        let mut tape = Tape::with_frozen(&Group::ALL);
        let inj = self.encode(&mut tape, store, scene)?;
        Ok(tape.value(inj).clone())
    }

    /// Greedy answer to `instruction` about `scene`.
    pub fn answer(&self, store: &ParamStore, scene: &SceneInput, system: &str, instruction: &str, max_new: usize) -> Result<String> {
        let prefix = self.layout(system, scene.object_count(), instruction, None)?;
        let tokens = self.point_tokens(store, scene)?;
        self.lm.generate(store, &prefix, &tokens, &self.vocab, max_new)
    }
}

pub fn store_tensors(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .named_values()
        .map(|(n, m)| NamedTensor::from_matrix(n, m, DType::F64))
        .collect()
}

pub fn save_model(dir: &Path, model: &Model, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = serde_json::to_string_pretty(&model.config).map_err(|e| Error::Data(e.to_string()))?;
    let p = dir.join("model.json");
    fs::write(&p, cfg + "\n").map_err(|e| Error::io(&p, e))?;
    model.vocab.save(&dir.join("vocab.txt"))?;
    checkpoint::save(&dir.join("model.ckpt"), &store_tensors(store))
}

pub fn load_model(dir: &Path) -> Result<(Model, ParamStore)> {
    let p = dir.join("model.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::parse(&p, "json", e.to_string()))?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    let (model, mut store) = Model::new(config, vocab, 0)?;
    let tensors = checkpoint::load(&dir.join("model.ckpt"))?;
    store.load_values(&checkpoint::to_map(&tensors)?)?;
    Ok((model, store))
}

/// Scenes keyed by id.
pub type SceneMap = BTreeMap<String, Scene>;
