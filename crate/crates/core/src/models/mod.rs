//! Encoder-decoder sequence model shared by the target model and the
//! prompt generator, the reproduction distance, and checkpoints.
//!
//! Decoding is single-pass: the decoder is driven by learned positional
//! queries rather than by its own previous outputs, so the whole
//! prompt-generator -> target-model composition is differentiable.

mod checkpoint;
pub mod tape;
mod transformer;

use ndarray::{Array2, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::ContainerError;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use tape::{Gradients, Scalar, Tape, Var};
pub use transformer::Traced;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("model produced non-finite output")]
    NonFinite,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub dropout: f64,
}

/// Architecture sizes without the data-dependent shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Preset {
    /// Six layers, eight heads, width 512.
    pub const FULL: Preset = Preset {
        n_layers: 6,
        n_heads: 8,
        d_model: 512,
        d_ff: 2048,
        dropout: 0.1,
    };

    /// Small enough to train on a laptop CPU in minutes.
    pub const DESK: Preset = Preset {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        d_ff: 128,
        dropout: 0.1,
    };

    pub fn config(
        &self,
        in_len: usize,
        in_features: usize,
        out_len: usize,
        out_features: usize,
    ) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            in_features,
            out_features,
            in_len,
            out_len,
            dropout: self.dropout,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("in_features", self.in_features),
            ("out_features", self.out_features),
            ("in_len", self.in_len),
            ("out_len", self.out_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Same architecture with input and output shapes exchanged.
    pub fn swapped(&self) -> ModelConfig {
        ModelConfig {
            in_features: self.out_features,
            out_features: self.in_features,
            in_len: self.out_len,
            out_len: self.in_len,
            ..*self
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.in_len, self.in_features)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.out_len, self.out_features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Train,
    Inference,
}

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub values: Vec<Array2<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over the raw parameter bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for v in &self.values {
            buf.clear();
            for &x in v.iter() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().into()
    }
}

pub struct Seq2SeqModel<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    mode: Mode,
    pub meta: CheckpointMeta,
    layout: transformer::Layout,
}

impl<T: Scalar> Clone for Seq2SeqModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            mode: self.mode,
            meta: self.meta,
            layout: self.layout.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Seq2SeqModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Seq2SeqModel")
            .field("config", &self.config)
            .field("mode", &self.mode)
            .field("meta", &self.meta)
            .field("parameters", &self.params.total_size())
            .finish()
    }
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Deterministically initialized model in TRAIN mode.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, params) = transformer::init(&config, seed);
        Ok(Self {
            config,
            params,
            mode: Mode::Train,
            meta: CheckpointMeta {
                seed,
                ..Default::default()
            },
            layout,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamSet<T>,
        meta: CheckpointMeta,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = transformer::Layout::new(&config);
        let expected = transformer::param_shapes(&config);
        if params.len() != expected.len() {
            return Err(ModelError::Corrupt(format!(
                "{} parameter arrays, expected {}",
                params.len(),
                expected.len()
            )));
        }
        for ((name, shape), (pname, v)) in expected.iter().zip(params.names.iter().zip(&params.values)) {
            if name != pname || *shape != v.dim() {
                return Err(ModelError::Corrupt(format!(
                    "parameter {pname} {:?} does not match {name} {shape:?}",
                    v.dim()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            mode: Mode::Inference,
            meta,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable parameter access, only in TRAIN mode.
    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        assert_eq!(self.mode, Mode::Train, "parameters are frozen in INFERENCE mode");
        &mut self.params
    }

    pub fn param_digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    /// Record the model's computation for a stacked batch on `tape`.
    ///
    /// `input` must be `[batch * in_len x in_features]`. In TRAIN mode the
    /// parameters enter the tape as trainable leaves; in INFERENCE mode as
    /// constants, so no gradient can reach them. Dropout is applied only
    /// when `dropout_rng` is given and the model is in TRAIN mode.
    pub fn trace(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Traced, ModelError> {
        let expected = (batch * self.config.in_len, self.config.in_features);
        let got = tape.value(input).dim();
        if got != expected {
            return Err(ModelError::Shape { expected, got });
        }
        let rng = match self.mode {
            Mode::Train => dropout_rng,
            Mode::Inference => None,
        };
        Ok(transformer::trace(
            &self.layout,
            &self.config,
            &self.params,
            self.mode == Mode::Train,
            tape,
            input,
            batch,
            rng,
        ))
    }

    /// Deterministic forward pass on one sample, without dropout.
    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>, ModelError> {
        Ok(self.forward_batch(std::slice::from_ref(x))?.pop().unwrap())
    }

    /// Deterministic forward pass on several samples, without dropout.
    pub fn forward_batch(&self, xs: &[Array2<T>]) -> Result<Vec<Array2<T>>, ModelError> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.config.input_shape();
        for x in xs {
            if x.dim() != shape {
                return Err(ModelError::Shape {
                    expected: shape,
                    got: x.dim(),
                });
            }
        }
        let mut tape = Tape::new();
        let input = tape.constant(stack_rows(xs));
        let traced = transformer::trace(
            &self.layout,
            &self.config,
            &self.params,
            false,
            &mut tape,
            input,
            xs.len(),
            None,
        );
        let out = tape.value(traced.output);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(split_rows(out, xs.len()))
    }
}

/// Stack equally shaped matrices vertically.
pub fn stack_rows<T: Scalar>(xs: &[Array2<T>]) -> Array2<T> {
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Split a stacked matrix back into `parts` equal row blocks.
pub fn split_rows<T: Scalar>(x: &Array2<T>, parts: usize) -> Vec<Array2<T>> {
    let rows = x.nrows() / parts;
    (0..parts)
        .map(|i| x.slice(ndarray::s![i * rows..(i + 1) * rows, ..]).to_owned())
        .collect()
}

/// Mean squared error over every timestep and feature.
pub fn distance<T: Scalar>(v: &Array2<T>, v_hat: &Array2<T>) -> Result<f64, ModelError> {
    if v.dim() != v_hat.dim() {
        return Err(ModelError::Shape {
            expected: v.dim(),
            got: v_hat.dim(),
        });
    }
    if v.is_empty() {
        return Ok(0.0);
    }
    let sum = Zip::from(v).and(v_hat).fold(0.0f64, |acc, &a, &b| {
        let d = a.to_f64().unwrap() - b.to_f64().unwrap();
        acc + d * d
    });
    Ok(sum / v.len() as f64)
}

pub fn to_precision<T: Scalar>(x: &Array2<f64>) -> Array2<T> {
    x.mapv(T::from_f64_lossy)
}

pub fn to_f64<T: Scalar>(x: &Array2<T>) -> Array2<f64> {
    x.mapv(|v| v.to_f64().unwrap())
}
