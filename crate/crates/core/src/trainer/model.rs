use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, ParamStore, Var};
use crate::parm::{ContextOrder, Parm, ParmConfig, PooledHead};
use crate::perception::{EncoderConfig, Perception};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Parm,
    /// Pooled features of each slot and of the other three, through an MLP.
    PooledMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub parm: ParmConfig,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            parm: ParmConfig::default(),
            head: HeadKind::Parm,
        }
    }
}

#[derive(Clone, Debug)]
enum Reasoner {
    Parm(Parm),
    Pooled(PooledHead),
}

/// Encoder, projection and reasoning head with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    perception: Perception,
    reasoner: Reasoner,
}

/// Forward products of one batch.
pub struct Forward {
    pub features: Var,
    pub logits: Var,
    /// Prediction errors per reasoning level; empty for the pooled head.
    pub errors: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let perception = Perception::new(config.encoder.clone(), &mut store, &mut rng)?;
        let feature = config.encoder.feature_shape();
        let reasoner = match config.head {
            HeadKind::Parm => Reasoner::Parm(Parm::new(config.parm.clone(), feature, &mut store, &mut rng)?),
            HeadKind::PooledMlp => {
                config.parm.validate()?;
                Reasoner::Pooled(PooledHead::new(feature[0], &mut store, &mut rng))
            }
        };
        Ok(Self {
            config,
            store,
            perception,
            reasoner,
        })
    }

    pub fn perception(&self) -> &Perception {
        &self.perception
    }

    pub fn parm(&self) -> Option<&Parm> {
        match &self.reasoner {
            Reasoner::Parm(p) => Some(p),
            Reasoner::Pooled(_) => None,
        }
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn load_params(&mut self, params: &ParamStore<T>) -> Result<(), NumericsError> {
        self.store.load_from(params)
    }

    /// Images `[4B, 3, H, W]` to logits `[B, 4]`.
    pub fn forward(&self, g: &mut Graph<T>, images: Var, order: &mut ContextOrder) -> Result<Forward, NumericsError> {
        let features = self.perception.encode(g, &self.store, images)?;
        self.reason(g, features, order)
    }

    pub fn reason(&self, g: &mut Graph<T>, features: Var, order: &mut ContextOrder) -> Result<Forward, NumericsError> {
        match &self.reasoner {
            Reasoner::Parm(p) => {
                let r = p.reason(g, &self.store, features, order)?;
                Ok(Forward {
                    features,
                    logits: r.logits,
                    errors: r.errors,
                })
            }
            Reasoner::Pooled(h) => Ok(Forward {
                features,
                logits: h.logits(g, &self.store, features)?,
                errors: Vec::new(),
            }),
        }
    }
}
