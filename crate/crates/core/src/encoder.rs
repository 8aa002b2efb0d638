//! Four-block convolutional encoder.
//!
//! Each block is `conv3x3 (SAME) -> batch norm -> ReLU -> 2x2 max pool`.
//! With floor pooling a 28x28 input collapses to 1x1 after four blocks, so
//! the last convolution acts as a fully connected layer onto `D + D_S`
//! channels. The first `D` channels are the embedding, the last `D_S` the
//! raw covariance output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Small,
    Big,
}

/// Shape of the per-image covariance estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Plain prototypical network, no covariance output.
    Vanilla,
    /// One value per image, `S = s I`.
    Radius,
    /// One value per embedding dimension.
    Diagonal,
}

/// Where the raw covariance channels are read from in the last block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Batch-normalized and pooled, but not rectified: unconstrained sign.
    #[default]
    PreRelu,
    /// After the full block including ReLU: `s_raw >= 0`.
    PostRelu,
}

/// Which statistics batch normalization uses outside of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStats {
    /// Always normalize with the statistics of the batch being encoded.
    #[default]
    Batch,
    /// Track exponential running averages during training and use them
    /// for inference.
    Running,
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub embedding_dim: usize,
    pub covariance: CovarianceKind,
    #[serde(default)]
    pub covariance_source: CovarianceSource,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default)]
    pub norm_stats: NormStats,
}

impl EncoderConfig {
    pub fn new(arch: Arch, embedding_dim: usize, covariance: CovarianceKind) -> Self {
        EncoderConfig {
            arch,
            embedding_dim,
            covariance,
            covariance_source: CovarianceSource::default(),
            bn_eps: default_bn_eps(),
            norm_stats: NormStats::default(),
        }
    }

    /// `D_S`: 0 for vanilla, 1 for radius, `D` for diagonal.
    pub fn cov_dim(&self) -> usize {
        match self.covariance {
            CovarianceKind::Vanilla => 0,
            CovarianceKind::Radius => 1,
            CovarianceKind::Diagonal => self.embedding_dim,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.embedding_dim + self.cov_dim()
    }

    pub fn filters(&self) -> [usize; 4] {
        let last = self.output_channels();
        match self.arch {
            Arch::Small => [64, 64, 64, last],
            Arch::Big => [128, 256, 512, last],
        }
    }

    /// Whether `D` is one of the embedding sizes explored for this arch.
    pub fn is_standard_configuration(&self) -> bool {
        let allowed: &[usize] = match self.arch {
            Arch::Small => &[32, 64, 128],
            Arch::Big => &[128, 256, 512],
        };
        allowed.contains(&self.embedding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!("bn_eps must be positive, got {}", self.bn_eps)));
        }
        Ok(())
    }
}

/// Trainable weights of one block plus optional running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Element = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: Option<BatchStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Element = f32> {
    pub blocks: Vec<BlockParams<T>>,
}

/// Tape handles for the encoder weights.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub blocks: Vec<[Var; 4]>,
}

/// Result of encoding a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `B x 1 x 1 x (D + D_S)` volume after the last block.
    pub volume: Var,
    /// `B x D`.
    pub embeddings: Var,
    /// `B x D_S`.
    pub s_raw: Var,
    /// Batch statistics from each block's normalization.
    pub batch_stats: Vec<BatchStats<T>>,
}

const RUNNING_MOMENTUM: f64 = 0.1;

impl<T: Element> EncoderParams<T> {
    /// Deterministic He-normal initialization: kernels ~ N(0, 2 / fan_in),
    /// zero biases, unit gamma and zero beta.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let mut blocks = Vec::with_capacity(4);
        for cout in config.filters() {
            let fan_in = 9 * cin;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let kernel_data: Vec<f64> = (0..fan_in * cout).map(|_| normal.sample(&mut rng)).collect();
            let running = match config.norm_stats {
                NormStats::Batch => None,
                NormStats::Running => Some(BatchStats {
                    mean: vec![T::zero(); cout],
                    var: vec![T::one(); cout],
                }),
            };
            blocks.push(BlockParams {
                kernel: Tensor::from_f64([3, 3, cin, cout], &kernel_data)?,
                bias: Tensor::zeros([cout]),
                gamma: Tensor::full([cout], T::one()),
                beta: Tensor::zeros([cout]),
                running,
            });
            cin = cout;
        }
        Ok(EncoderParams { blocks })
    }

    pub fn filters(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.bias.len()).collect()
    }

    /// Parameter tensors in declaration order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.kernel"), &b.kernel));
            out.push((format!("block{i}.bias"), &b.bias));
            out.push((format!("block{i}.gamma"), &b.gamma));
            out.push((format!("block{i}.beta"), &b.beta));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta])
            .collect()
    }

    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> EncoderVars {
        let mut rec = |t: &Tensor<T>| if trainable { tape.parameter(t) } else { tape.constant(t.clone()) };
        EncoderVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| [rec(&b.kernel), rec(&b.bias), rec(&b.gamma), rec(&b.beta)])
                .collect(),
        }
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[BatchStats<T>]) {
        let m = T::from_f64_lossy(RUNNING_MOMENTUM);
        for (block, stats) in self.blocks.iter_mut().zip(batch) {
            if let Some(run) = &mut block.running {
                for (r, &b) in run.mean.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                for (r, &b) in run.var.iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

/// Runs the encoder on a `B x 28 x 28 x 1` batch.
///
/// `use_running` selects running statistics for normalization; it is only
/// honoured when the parameters carry them.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    params: &EncoderParams<T>,
    vars: &EncoderVars,
    images: Var,
    use_running: bool,
) -> Result<EncoderOutput<T>> {
    let shape = tape.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1..] != [IMAGE_SIDE, IMAGE_SIDE, 1] {
        return Err(Error::shape(
            "encode",
            format!("expected B x {IMAGE_SIDE} x {IMAGE_SIDE} x 1 images, got {shape:?}"),
        ));
    }
    if vars.blocks.len() != 4 || params.blocks.len() != 4 {
        return Err(Error::Config("encoder must have exactly 4 blocks".into()));
    }
    let batch = shape[0];
    let last = vars.blocks.len() - 1;
    let mut x = images;
    let mut batch_stats = Vec::with_capacity(4);
    for (i, ([kernel, bias, gamma, beta], block)) in vars.blocks.iter().zip(&params.blocks).enumerate() {
        let conv = tape.conv2d_same(x, *kernel, *bias)?;
        let normed = match (&block.running, use_running) {
            (Some(stats), true) => tape.batchnorm_frozen(conv, *gamma, *beta, stats, config.bn_eps)?,
            _ => {
                let (v, stats) = tape.batchnorm_train(conv, *gamma, *beta, config.bn_eps)?;
                batch_stats.push(stats);
                v
            }
        };
        // ReLU is monotone, so pooling first gives the same values and the
        // same gradients on a quarter of the elements. The last block stays
        // unrectified here because the covariance channels may need it.
        let pooled = tape.maxpool_2x2(normed)?;
        x = if i == last { pooled } else { tape.relu(pooled)? };
    }
    let out_shape = tape.value(x).shape().to_vec();
    let channels = config.output_channels();
    if out_shape != [batch, 1, 1, channels] {
        return Err(Error::shape(
            "encode",
            format!("final volume {out_shape:?}, expected [{batch}, 1, 1, {channels}]"),
        ));
    }
    let pooled = tape.reshape(x, &[batch, channels])?;
    let rectified = tape.relu(pooled)?;
    let d = config.embedding_dim;
    let embeddings = tape.slice_cols(rectified, 0, d)?;
    let cov_src = match config.covariance_source {
        CovarianceSource::PreRelu => pooled,
        CovarianceSource::PostRelu => rectified,
    };
    let s_raw = tape.slice_cols(cov_src, d, config.cov_dim())?;
    // Expose the volume as it leaves the full last block.
    let volume = tape.reshape(rectified, &[batch, 1, 1, channels])?;
    Ok(EncoderOutput { volume, embeddings, s_raw, batch_stats })
}
