//! Encoder weights, covariance head settings and transform scalars bundled
//! into one trainable model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::encoder::{encode, CovarianceKind, EncoderConfig, EncoderParams, EncoderVars, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::head::{
    raw_to_inverse_cov, ClassPrototype, CovarianceTransform, DistanceTransform, ScalarVars, TransformScalars,
};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub covariance_transform: CovarianceTransform,
    #[serde(default)]
    pub distance: DistanceTransform,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    pub fn has_covariance(&self) -> bool {
        self.encoder.covariance != CovarianceKind::Vanilla
    }

    /// The transform scalars are only trained under the trainable transform.
    pub fn trains_scalars(&self) -> bool {
        self.has_covariance() && self.covariance_transform == CovarianceTransform::TrainableSoftplus
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    /// One-element tensors: offset, scale, div.
    pub scalars: [Tensor<T>; 3],
}

pub const SCALAR_NAMES: [&str; 3] = ["offset", "scale", "div"];

/// Tape handles for a model attached to a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub scalars: Option<ScalarVars>,
}

impl ModelVars {
    /// Tape handles aligned with [`Model::tensors_mut`]; `None` where the
    /// tensor is not on the tape.
    pub fn param_vars(&self) -> Vec<Option<Var>> {
        let mut out: Vec<Option<Var>> = self.encoder.blocks.iter().flatten().map(|&v| Some(v)).collect();
        match self.scalars {
            Some(s) => out.extend([Some(s.offset), Some(s.scale), Some(s.div)]),
            None => out.extend([None, None, None]),
        }
        out
    }
}

/// Per-image outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub embeddings: Var,
    pub s_raw: Var,
    /// Transformed inverse covariance, `None` for a vanilla model.
    pub inv_cov: Option<Var>,
    pub batch_stats: Vec<BatchStats<T>>,
}

impl<T: Element> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::build(&config.encoder, seed)?;
        let d = TransformScalars::default();
        let scalars = [d.offset, d.scale, d.div].map(|v| Tensor::scalar(T::from_f64_lossy(v)));
        Ok(Model { config, encoder, scalars })
    }

    pub fn transform_scalars(&self) -> TransformScalars {
        let [o, s, d] = &self.scalars;
        TransformScalars {
            offset: o.data()[0].to_f64_lossy(),
            scale: s.data()[0].to_f64_lossy(),
            div: d.data()[0].to_f64_lossy(),
        }
    }

    /// All parameter tensors with stable names, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named_tensors();
        for (name, t) in SCALAR_NAMES.iter().zip(&self.scalars) {
            out.push((name.to_string(), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.scalars.iter_mut());
        out
    }

    /// Records the parameters on `tape`. Scalars only become trainable when
    /// the trainable transform is selected; otherwise they never reach the
    /// loss and keep their initial values.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let encoder = self.encoder.attach(tape, trainable);
        let scalars = self.config.trains_scalars().then(|| {
            let mut rec =
                |t: &Tensor<T>| if trainable { tape.parameter(t) } else { tape.constant(t.clone()) };
            ScalarVars { offset: rec(&self.scalars[0]), scale: rec(&self.scalars[1]), div: rec(&self.scalars[2]) }
        });
        ModelVars { encoder, scalars }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        images: Var,
        use_running: bool,
    ) -> Result<ModelOutput<T>> {
        let out = encode(tape, &self.config.encoder, &self.encoder, &vars.encoder, images, use_running)?;
        let inv_cov = if self.config.has_covariance() {
            let scalars = match self.config.covariance_transform {
                CovarianceTransform::TrainableSoftplus => Some(vars.scalars.ok_or_else(|| {
                    Error::Contract("model attached without transform scalars".into())
                })?),
                _ => None,
            };
            Some(raw_to_inverse_cov(tape, out.s_raw, self.config.covariance_transform, scalars)?)
        } else {
            None
        };
        Ok(ModelOutput { embeddings: out.embeddings, s_raw: out.s_raw, inv_cov, batch_stats: out.batch_stats })
    }

    /// Embeds a batch without recording gradients. Returns per-image
    /// embeddings and per-image inverse covariances broadcast to `D`
    /// (all ones for a vanilla model).
    pub fn embed(&self, images: &[f32], use_running: bool) -> Result<Embedded> {
        let n = images.len() / (IMAGE_SIDE * IMAGE_SIDE);
        let data: Vec<T> = images.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let imgs = tape.constant(Tensor::new([n, IMAGE_SIDE, IMAGE_SIDE, 1], data)?);
        let out = self.forward(&mut tape, &vars, imgs, use_running)?;
        let d = self.config.encoder.embedding_dim;
        let to_rows = |t: &Tensor<T>, w: usize| -> Vec<Vec<f64>> {
            if w == 0 {
                return vec![Vec::new(); n];
            }
            t.data().chunks_exact(w).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect()
        };
        let embeddings = to_rows(tape.value(out.embeddings), d);
        let s_raw = to_rows(tape.value(out.s_raw), self.config.encoder.cov_dim());
        let inv_cov = match out.inv_cov {
            None => vec![vec![1.0; d]; n],
            Some(v) => {
                let w = self.config.encoder.cov_dim();
                to_rows(tape.value(v), w)
                    .into_iter()
                    .map(|r| if w == 1 { vec![r[0]; d] } else { r })
                    .collect()
            }
        };
        Ok(Embedded { embeddings, s_raw, inv_cov })
    }
}

/// Plain per-image outputs of [`Model::embed`].
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub embeddings: Vec<Vec<f64>>,
    pub s_raw: Vec<Vec<f64>>,
    pub inv_cov: Vec<Vec<f64>>,
}

impl Embedded {
    /// Fuses prototypes for the given per-class support indices.
    pub fn prototypes(&self, support: &[Vec<usize>]) -> Result<Vec<ClassPrototype>> {
        support
            .iter()
            .map(|rows| {
                let xs: Vec<&[f64]> = rows.iter().map(|&r| self.embeddings[r].as_slice()).collect();
                let ss: Vec<&[f64]> = rows.iter().map(|&r| self.inv_cov[r].as_slice()).collect();
                crate::head::fuse_prototype(&xs, &ss)
            })
            .collect()
    }
}
