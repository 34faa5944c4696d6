//! Encoder, multivariate quality head and gradient-reversed domain branch.
//!
//! All three components are dense ReLU networks over row-major batches:
//! the encoder maps pooled features `[B, F]` to latents `h: [B, H]`, the
//! quality head maps `h` linearly to `A + A(A+1)/2` raw outputs (means and a
//! packed Cholesky factor), and the domain branch maps `grl(h)` to `D` logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub const DEFAULT_ASPECTS: [&str; 4] = ["PQ", "PC", "CE", "CU"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub aspects: Vec<String>,
    pub domain_hidden: Vec<usize>,
    pub num_domains: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_domains: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![256, 128],
            latent_dim: 64,
            aspects: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            domain_hidden: vec![32],
            num_domains,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    /// Width of the quality head: `A` means plus `A(A+1)/2` factor entries.
    pub fn head_width(&self) -> usize {
        let a = self.num_aspects();
        a + a * (a + 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_dim == 0 || self.latent_dim == 0 || self.num_domains == 0 {
            return bad("input_dim, latent_dim and num_domains must be >= 1".into());
        }
        if self.aspects.is_empty() {
            return bad("at least one aspect is required".into());
        }
        if self.encoder_hidden.is_empty() || self.domain_hidden.is_empty() {
            return bad("hidden layer lists must be non-empty".into());
        }
        if self.encoder_hidden.iter().chain(&self.domain_hidden).any(|&w| w == 0) {
            return bad("hidden widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.latent_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn domain_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.latent_dim];
        widths.extend(&self.domain_hidden);
        widths.push(self.num_domains);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Array::new(vec![fan_in, fan_out], data).expect("sized above"),
            bias: Array::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array::zeros(&[fan_in, fan_out]),
            bias: Array::zeros(&[fan_out]),
        }
    }
}

/// Every trainable array of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub quality: Dense,
    pub domain: Vec<Dense>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases. Encoder, quality head and
    /// domain branch draw from separate streams.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = rng::stream(config.seed, Stream::Init, 0);
        let mut head_rng = rng::stream(config.seed, Stream::Init, 1);
        let mut dom_rng = rng::stream(config.seed, Stream::Init, 2);
        Ok(Self {
            encoder: config
                .encoder_dims()
                .into_iter()
                .map(|(i, o)| Dense::glorot(i, o, &mut enc_rng))
                .collect(),
            quality: Dense::glorot(config.latent_dim, config.head_width(), &mut head_rng),
            domain: config
                .domain_dims()
                .into_iter()
                .map(|(i, o)| Dense::glorot(i, o, &mut dom_rng))
                .collect(),
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: config.encoder_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            quality: Dense::zeros(config.latent_dim, config.head_width()),
            domain: config.domain_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
        })
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        let enc = self.encoder.iter().enumerate().map(|(i, d)| (format!("encoder.{i}"), d));
        let head = std::iter::once(("quality".to_string(), &self.quality));
        let dom = self.domain.iter().enumerate().map(|(i, d)| (format!("domain.{i}"), d));
        enc.chain(head).chain(dom)
    }

    /// Arrays in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Array)> {
        self.layers()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), &d.weight),
                    (format!("{name}.bias"), &d.bias),
                ]
            })
            .collect()
    }

    /// Mutable arrays in the same order as [`ModelParams::named`].
    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        for d in self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.quality))
            .chain(self.domain.iter_mut())
        {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Rebuilds parameters from named arrays, checking names and shapes.
    pub fn from_named(config: &ModelConfig, arrays: Vec<(String, Array)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, a)| (n, a.shape().to_vec()))
            .collect();
        if expected.len() != arrays.len() {
            return Err(Error::ArrayCount {
                expected: expected.len(),
                found: arrays.len(),
            });
        }
        for ((slot, (name, shape)), (got_name, array)) in
            params.arrays_mut().into_iter().zip(&expected).zip(arrays)
        {
            if *name != got_name || shape.as_slice() != array.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected array `{name}` {shape:?}, found `{got_name}` {:?}",
                    array.shape()
                )));
            }
            *slot = array;
        }
        Ok(params)
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        for ((name, a), (_, b)) in self.named().into_iter().zip(reference.named()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{name} is {:?}, config implies {:?}", a.shape(), b.shape()),
                ));
            }
        }
        if self.encoder.len() != reference.encoder.len() || self.domain.len() != reference.domain.len() {
            return Err(Error::shape("params", "layer count differs from config"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundDense {
    weight: NodeId,
    bias: NodeId,
}

/// Parameter leaves placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    encoder: Vec<BoundDense>,
    quality: BoundDense,
    domain: Vec<BoundDense>,
}

impl Bound {
    pub fn bind(params: &ModelParams, tape: &mut Tape) -> Result<Self> {
        let mut leaf = |d: &Dense| -> Result<BoundDense> {
            Ok(BoundDense {
                weight: tape.leaf(d.weight.clone())?,
                bias: tape.leaf(d.bias.clone())?,
            })
        };
        let encoder = params.encoder.iter().map(&mut leaf).collect::<Result<_>>()?;
        let quality = leaf(&params.quality)?;
        let domain = params.domain.iter().map(&mut leaf).collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            quality,
            domain,
        })
    }

    /// Leaf ids in the order of [`ModelParams::named`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.quality))
            .chain(&self.domain)
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }

    pub fn encoder_ids(&self) -> Vec<NodeId> {
        self.encoder.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }
}

/// Forward mode; dropout is active only while training.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

fn dense(tape: &mut Tape, x: NodeId, layer: BoundDense) -> Result<NodeId> {
    let z = tape.matmul(x, layer.weight)?;
    tape.add_bias(z, layer.bias)
}

/// Encoder forward: ReLU between hidden layers, linear output `h`.
pub fn encode(
    config: &ModelConfig,
    bound: &Bound,
    tape: &mut Tape,
    x: NodeId,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.shape()[1] != config.input_dim {
        return Err(Error::shape(
            "encode",
            format!("expected [B, {}], got {:?}", config.input_dim, xv.shape()),
        ));
    }
    let last = bound.encoder.len() - 1;
    let mut h = x;
    for (i, layer) in bound.encoder.iter().enumerate() {
        h = dense(tape, h, *layer)?;
        if i < last {
            h = tape.relu(h)?;
            if let Mode::Train(rng) = mode {
                if config.dropout_rate > 0.0 {
                    let p = config.dropout_rate;
                    let keep = 1.0 / (1.0 - p);
                    let n = tape.value(h).len();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    h = tape.mask(h, mask)?;
                }
            }
        }
    }
    Ok(h)
}

/// Quality head: returns `(m, chol)` nodes of shapes `[B, A]` and `[B, A, A]`.
pub fn quality_head(
    config: &ModelConfig,
    bound: &Bound,
    tape: &mut Tape,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let a = config.num_aspects();
    let raw = dense(tape, h, bound.quality)?;
    let m = tape.slice(raw, 0, a)?;
    let packed = tape.slice(raw, a, a * (a + 1) / 2)?;
    let chol = tape.exp_diagonal(packed)?;
    Ok((m, chol))
}

/// Domain branch applied to `grl(h)`.
pub fn domain_head(bound: &Bound, tape: &mut Tape, h: NodeId, grl_scale: f64) -> Result<NodeId> {
    let reversed = tape.grl(h, grl_scale)?;
    domain_mlp(bound, tape, reversed)
}

/// The domain branch without gradient reversal.
pub fn domain_mlp(bound: &Bound, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
    let last = bound.domain.len() - 1;
    let mut z = h;
    for (i, layer) in bound.domain.iter().enumerate() {
        z = dense(tape, z, *layer)?;
        if i < last {
            z = tape.relu(z)?;
        }
    }
    Ok(z)
}

/// Predicted mean vector and Cholesky factor for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityPrediction {
    pub m: Vec<f64>,
    /// Row-major lower-triangular `A x A` factor of the covariance.
    pub chol: Array,
}

impl QualityPrediction {
    /// `L L'`.
    pub fn covariance(&self) -> Vec<f64> {
        let a = self.m.len();
        let l = self.chol.data();
        let mut out = vec![0.0; a * a];
        for i in 0..a {
            for j in 0..a {
                out[i * a + j] = (0..a).map(|k| l[i * a + k] * l[j * a + k]).sum();
            }
        }
        out
    }
}

fn bind_quality_path(params: &ModelParams, tape: &mut Tape) -> Result<Bound> {
    let mut leaf = |d: &Dense| -> Result<BoundDense> {
        Ok(BoundDense {
            weight: tape.leaf(d.weight.clone())?,
            bias: tape.leaf(d.bias.clone())?,
        })
    };
    let encoder = params.encoder.iter().map(&mut leaf).collect::<Result<_>>()?;
    let quality = leaf(&params.quality)?;
    Ok(Bound {
        encoder,
        quality,
        domain: Vec::new(),
    })
}

/// Inference-mode latents for a batch `x: [B, F]`.
pub fn latents(config: &ModelConfig, params: &ModelParams, x: &Array) -> Result<Array> {
    let mut tape = Tape::new();
    let bound = bind_quality_path(params, &mut tape)?;
    let xi = tape.leaf(x.clone())?;
    let h = encode(config, &bound, &mut tape, xi, &mut Mode::Infer)?;
    Ok(tape.value(h).clone())
}

/// Inference path: encoder and quality head only, no dropout.
pub fn predict(config: &ModelConfig, params: &ModelParams, x: &Array) -> Result<Vec<QualityPrediction>> {
    let mut tape = Tape::new();
    let bound = bind_quality_path(params, &mut tape)?;
    let xi = tape.leaf(x.clone())?;
    let h = encode(config, &bound, &mut tape, xi, &mut Mode::Infer)?;
    let (m, chol) = quality_head(config, &bound, &mut tape, h)?;
    let a = config.num_aspects();
    let (mv, lv) = (tape.value(m), tape.value(chol));
    Ok((0..mv.outer())
        .map(|i| QualityPrediction {
            m: mv.row(i).to_vec(),
            chol: Array::new(vec![a, a], lv.data()[i * a * a..(i + 1) * a * a].to_vec())
                .expect("sized by head"),
        })
        .collect())
}
