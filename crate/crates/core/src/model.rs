//! Model configuration and the parameter layout shared by training, decoding
//! and persistence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::encoder::{EncoderParams, TextVocab};
use crate::generator::{CacheStrategy, GeneratorParams};
use crate::numerics::{HasParams, MaskMode, ParamStore, Tensor};
use crate::registry::DslRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub patch_dim: usize,
    pub cache_strategy: CacheStrategy,
    pub mask_mode: MaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            patch_dim: 16,
            cache_strategy: CacheStrategy::default(),
            mask_mode: MaskMode::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden size must be even and at least 2, got {}",
                self.hidden
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("at least one encoder layer".into()));
        }
        if self.patch_dim == 0 {
            return Err(ModelError::InvalidConfig("patch dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tensor `{0}` missing")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnknownTensor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub generator: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub registry: DslRegistry,
    pub vocab: TextVocab,
    pub params: ParamStore,
    pub layout: ModelLayout,
}

impl ModelState {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(
        config: ModelConfig,
        registry: DslRegistry,
        vocab: TextVocab,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let encoder = EncoderParams::register(
            &mut params,
            vocab.len(),
            h,
            config.layers,
            config.patch_dim,
            &mut rng,
        );
        let classifier = ClassifierParams::register(&mut params, registry.types().len(), h, &mut rng);
        let generator = GeneratorParams::register(&mut params, registry.num_static(), h, &mut rng);
        Ok(Self {
            config,
            registry,
            vocab,
            params,
            layout: ModelLayout {
                encoder,
                classifier,
                generator,
            },
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// the layout implied by `config`, `registry` and `vocab`.
    pub fn from_tensors(
        config: ModelConfig,
        registry: DslRegistry,
        vocab: TextVocab,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut state = Self::new(config, registry, vocab, 0)?;
        let mut seen = vec![false; state.params.len()];
        for (name, tensor) in tensors {
            let id = state
                .params
                .id(&name)
                .ok_or_else(|| ModelError::UnknownTensor(name.clone()))?;
            let slot = state.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(ModelError::TensorShape {
                    name,
                    expected: slot.shape(),
                    found: tensor.shape(),
                });
            }
            *slot = tensor;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::MissingTensor(
                state.params.name(crate::numerics::ParamId(i)).to_string(),
            ));
        }
        Ok(state)
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }
}

impl HasParams for ModelState {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(hidden: usize, seed: u64) -> ModelState {
        ModelState::new(
            ModelConfig {
                hidden,
                ..ModelConfig::default()
            },
            DslRegistry::default_registry(),
            TextVocab::new(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn odd_hidden_rejected() {
        let r = ModelState::new(
            ModelConfig {
                hidden: 7,
                ..ModelConfig::default()
            },
            DslRegistry::default_registry(),
            TextVocab::new(),
            0,
        );
        assert!(matches!(r, Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(state(8, 3).params, state(8, 3).params);
        assert_ne!(state(8, 3).params, state(8, 4).params);
    }

    #[test]
    fn tensors_round_trip_and_shape_guard() {
        let s = state(8, 1);
        let tensors: Vec<_> = s.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let back = ModelState::from_tensors(s.config, s.registry.clone(), s.vocab.clone(), tensors.clone())
            .unwrap();
        assert_eq!(back.params, s.params);

        let wider = ModelConfig {
            hidden: 16,
            ..s.config
        };
        let err = ModelState::from_tensors(wider, s.registry.clone(), s.vocab.clone(), tensors).unwrap_err();
        assert!(matches!(err, ModelError::TensorShape { .. }));
    }
}
