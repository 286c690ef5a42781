use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneError, DIM, MLP_HIDDEN, PATCH, PATCH_AREA, TOKENS};
use crate::autodiff::Tensor;

macro_rules! weight_set {
    ($($name:ident: [$rows:expr, $cols:expr]),* $(,)?) => {
        /// One value per named weight array of the model.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Weights<T> {
            $(pub $name: T,)*
        }

        impl<T> Weights<T> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn shapes() -> Weights<(usize, usize)> {
                Weights { $($name: ($rows, $cols),)* }
            }

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> Weights<U> {
                Weights { $($name: f(stringify!($name), &self.$name),)* }
            }

            pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<Weights<U>, E> {
                Ok(Weights { $($name: f(stringify!($name), &self.$name)?,)* })
            }

            /// Fields in declaration order.
            pub fn values(&self) -> Vec<&T> {
                vec![$(&self.$name),*]
            }

            pub fn from_values(values: Vec<T>) -> Self {
                let mut it = values.into_iter();
                let w = Weights { $($name: it.next().expect("one value per weight"),)* };
                assert!(it.next().is_none(), "too many weight values");
                w
            }
        }
    };
}

weight_set! {
    patch_w: [PATCH_AREA, DIM],
    patch_b: [1, DIM],
    pos: [TOKENS, DIM],
    sa_q: [DIM, DIM],
    sa_k: [DIM, DIM],
    sa_v: [DIM, DIM],
    sa_o: [DIM, DIM],
    mlp_w1: [DIM, MLP_HIDDEN],
    mlp_b1: [1, MLP_HIDDEN],
    mlp_w2: [MLP_HIDDEN, DIM],
    mlp_b2: [1, DIM],
    mem_patch_w: [2 * PATCH_AREA, DIM],
    mem_patch_b: [1, DIM],
    mem_proj: [DIM, DIM],
    ca_q: [DIM, DIM],
    ca_k: [DIM, DIM],
    ca_v: [DIM, DIM],
    ca_o: [DIM, DIM],
    dec_w: [DIM, PATCH_AREA],
    dec_b: [1, PATCH_AREA],
    obj_w: [DIM, 1],
    obj_b: [1, 1],
}

/// Total number of scalar weights implied by the architecture constants.
pub fn param_count() -> usize {
    Weights::<()>::shapes().values().iter().map(|(r, c)| r * c).sum()
}

/// Backbone weights with a freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    weights: Weights<Tensor>,
    frozen: bool,
    init_seed: u64,
}

impl ModelParams {
    /// Fan-in scaled Gaussian matrices, zero biases.
    pub fn init(init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let weights = Weights::<()>::shapes().map(|_, &(rows, cols)| {
            // Every bias is a single row.
            if rows == 1 {
                return Tensor::zeros(rows, cols);
            }
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::from_fn(rows, cols, |_, _| std * gaussian(&mut rng))
        });
        Self {
            weights,
            frozen: false,
            init_seed,
        }
    }

    pub fn from_weights(weights: Weights<Tensor>, init_seed: u64) -> Result<Self, BackboneError> {
        let shapes = Weights::<()>::shapes();
        for ((name, t), (rows, cols)) in Weights::<()>::NAMES.iter().zip(weights.values()).zip(shapes.values()) {
            if t.shape() != [*rows, *cols] {
                return Err(BackboneError::ArchMismatch(format!(
                    "{name}: expected {rows}x{cols}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            weights,
            frozen: false,
            init_seed,
        })
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replaces every weight. Fails once the model is frozen.
    pub fn set_weights(&mut self, weights: Weights<Tensor>) -> Result<(), BackboneError> {
        if self.frozen {
            return Err(BackboneError::FrozenViolation);
        }
        *self = Self::from_weights(weights, self.init_seed)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over the little-endian bytes of every weight, in field order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.values() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            arch: ArchConstants::current(),
            init_seed: self.init_seed,
            frozen: self.frozen,
            weights: Weights::<()>::NAMES
                .iter()
                .zip(self.weights.values())
                .map(|(name, t)| (name.to_string(), NamedArray::from(t)))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, BackboneError> {
        if ck.magic != CHECKPOINT_MAGIC {
            return Err(BackboneError::Checkpoint(format!("bad magic {:?}", ck.magic)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(BackboneError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.arch != ArchConstants::current() {
            return Err(BackboneError::ArchMismatch(format!("{:?}", ck.arch)));
        }
        let mut arrays = ck.weights;
        let tensors = Weights::<()>::NAMES
            .iter()
            .map(|name| {
                let a = arrays
                    .remove(*name)
                    .ok_or_else(|| BackboneError::Checkpoint(format!("missing array {name}")))?;
                Tensor::new(a.shape, a.data).map_err(|e| BackboneError::Checkpoint(format!("{name}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(extra) = arrays.keys().next() {
            return Err(BackboneError::Checkpoint(format!("unexpected array {extra}")));
        }
        let mut params = Self::from_weights(Weights::from_values(tensors), ck.init_seed)?;
        params.frozen = ck.frozen;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(json: &str) -> Result<Self, BackboneError> {
        Self::from_checkpoint(serde_json::from_str(json)?)
    }
}

pub const CHECKPOINT_MAGIC: &str = "MEMSEG-W";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConstants {
    pub image_size: usize,
    pub patch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
}

impl ArchConstants {
    pub fn current() -> Self {
        Self {
            image_size: super::IMAGE,
            patch: PATCH,
            tokens: TOKENS,
            dim: DIM,
            mlp_hidden: MLP_HIDDEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for NamedArray {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// On-disk weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub arch: ArchConstants,
    pub init_seed: u64,
    pub frozen: bool,
    pub weights: BTreeMap<String, NamedArray>,
}

/// Standard normal draw via Box-Muller.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}
