//! Image/text encoders, shared-space similarity and the pseudo-classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{PcsrError, Result};
use crate::numerics::layers::{self, relu, relu_backward};
use crate::numerics::{argmax, dot, norm, DenseMatrix, LinearLayer, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img: usize,
    pub d_txt: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub num_classes: usize,
}

/// `linear → ReLU → linear → L2-normalize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: DenseMatrix,
    pre_activation: DenseMatrix,
    activation: DenseMatrix,
    raw: DenseMatrix,
    pub embedding: DenseMatrix,
}

impl Mlp {
    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Mlp {
            hidden: LinearLayer::init(d_in, hidden, rng),
            output: LinearLayer::init(hidden, d_out, rng),
        }
    }

    pub fn forward_batch(&self, x: DenseMatrix) -> Result<MlpCache> {
        let pre_activation = self.hidden.forward_batch(&x)?;
        let activation = relu(&pre_activation);
        let raw = self.output.forward_batch(&activation)?;
        let embedding = layers::l2_normalize_rows(&raw)?;
        Ok(MlpCache {
            input: x,
            pre_activation,
            activation,
            raw,
            embedding,
        })
    }

    /// Accumulates parameter gradients for an upstream gradient on the embeddings.
    pub fn backward_batch(&mut self, cache: &MlpCache, d_embedding: &DenseMatrix) -> Result<()> {
        let d_raw = layers::l2_normalize_rows_backward(&cache.raw, &cache.embedding, d_embedding);
        let d_act = self.output.backward_batch(&cache.activation, &d_raw)?;
        let d_pre = relu_backward(&cache.pre_activation, &d_act);
        self.hidden.backward_batch(&cache.input, &d_pre)?;
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.hidden.zero_grad();
        self.output.zero_grad();
    }
}

/// Encoders `f` (images), `g` (texts) and the pseudo-classifier `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub image: Mlp,
    pub text: Mlp,
    pub classifier: LinearLayer,
}

/// Softmax output of the pseudo-classifier and its argmax (ties to the lowest class).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

/// Which parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoders,
    Classifier,
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if [config.d_img, config.d_txt, config.hidden, config.d_emb].contains(&0)
            || config.num_classes < 2
        {
            return Err(PcsrError::config(format!("invalid model config {config:?}")));
        }
        Ok(ModelParams {
            config,
            image: Mlp::init(config.d_img, config.hidden, config.d_emb, rng),
            text: Mlp::init(config.d_txt, config.hidden, config.d_emb, rng),
            classifier: LinearLayer::init(config.d_emb, config.num_classes, rng),
        })
    }

    pub fn zero_grad(&mut self) {
        self.image.zero_grad();
        self.text.zero_grad();
        self.classifier.zero_grad();
    }

    /// Every parameter tensor with its gradient, in checkpoint order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [f64], &[f64])> {
        let mut out = Vec::with_capacity(10);
        for mlp in [&mut self.image, &mut self.text] {
            for layer in [&mut mlp.hidden, &mut mlp.output] {
                out.push((
                    ParamGroup::Encoders,
                    layer.weight.as_mut_slice(),
                    layer.grad_weight.as_slice(),
                ));
                out.push((ParamGroup::Encoders, &mut layer.bias[..], &layer.grad_bias[..]));
            }
        }
        let c = &mut self.classifier;
        out.push((ParamGroup::Classifier, c.weight.as_mut_slice(), c.grad_weight.as_slice()));
        out.push((ParamGroup::Classifier, &mut c.bias[..], &c.grad_bias[..]));
        out
    }

    fn layers(&self) -> [&LinearLayer; 5] {
        [
            &self.image.hidden,
            &self.image.output,
            &self.text.hidden,
            &self.text.output,
            &self.classifier,
        ]
    }

    fn layers_mut(&mut self) -> [&mut LinearLayer; 5] {
        [
            &mut self.image.hidden,
            &mut self.image.output,
            &mut self.text.hidden,
            &mut self.text.output,
            &mut self.classifier,
        ]
    }

    /// Flat copy of every parameter in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Flat copy of every gradient, aligned with [`ModelParams::flatten`].
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend_from_slice(layer.grad_weight.as_slice());
            out.extend_from_slice(&layer.grad_bias);
        }
        out
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self
            .layers()
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum();
        if values.len() != total {
            return Err(PcsrError::config(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        let mut rest = values;
        for layer in self.layers_mut() {
            let nw = layer.weight.as_slice().len();
            layer.weight.as_mut_slice().copy_from_slice(&rest[..nw]);
            rest = &rest[nw..];
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&rest[..nb]);
            rest = &rest[nb..];
        }
        Ok(())
    }

    pub fn embed_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.d_img {
            return Err(PcsrError::config(format!(
                "image features have {} dims, encoder expects {}",
                x.len(),
                self.config.d_img
            )));
        }
        let m = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.image.forward_batch(m)?.embedding.into_vec())
    }

    pub fn embed_text(&self, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != self.config.d_txt {
            return Err(PcsrError::config(format!(
                "text features have {} dims, encoder expects {}",
                t.len(),
                self.config.d_txt
            )));
        }
        let m = DenseMatrix::from_vec(1, t.len(), t.to_vec())?;
        Ok(self.text.forward_batch(m)?.embedding.into_vec())
    }

    pub fn embed_images(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.config.d_img {
            return Err(PcsrError::config("image feature width does not match encoder"));
        }
        Ok(self.image.forward_batch(x.clone())?.embedding)
    }

    pub fn embed_texts(&self, t: &DenseMatrix) -> Result<DenseMatrix> {
        if t.cols() != self.config.d_txt {
            return Err(PcsrError::config("text feature width does not match encoder"));
        }
        Ok(self.text.forward_batch(t.clone())?.embedding)
    }

    pub fn classify(&self, embedding: &[f64]) -> Result<PseudoPrediction> {
        let logits = self.classifier.forward(embedding)?;
        let probs = layers::softmax(&logits);
        let label = argmax(&probs);
        Ok(PseudoPrediction { probs, label })
    }

    /// Row-wise class probabilities for a batch of embeddings.
    pub fn classify_batch(&self, embeddings: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(layers::softmax_rows(&self.classifier.forward_batch(embeddings)?))
    }
}

/// Cosine similarity of two unit embeddings.
pub fn similarity(img_emb: &[f64], txt_emb: &[f64]) -> f64 {
    dot(img_emb, txt_emb)
}

/// `S[i, j] = similarity(images[i], texts[j])`.
pub fn similarity_matrix(images: &DenseMatrix, texts: &DenseMatrix) -> Result<DenseMatrix> {
    images.matmul_transposed(texts)
}

/// Cosine similarity between two probability vectors, clamped to `[0, 1]`.
pub fn distribution_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    let (np, nq) = (norm(p), norm(q));
    if np < layers::MIN_NORM || nq < layers::MIN_NORM {
        return Err(PcsrError::Degenerate(
            "distribution similarity of a zero vector".into(),
        ));
    }
    Ok((dot(p, q) / (np * nq)).clamp(0.0, 1.0))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PCSRCKPT";

/// Checkpoint header. Payload: one f64 block per tensor, weights then bias, for
/// image hidden, image output, text hidden, text output, classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub d_img: usize,
    pub d_txt: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub epoch: usize,
}

pub fn encode_checkpoint(params: &ModelParams, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let c = params.config;
    let header = CheckpointHeader {
        schema_version: 1,
        d_img: c.d_img,
        d_txt: c.d_txt,
        hidden: c.hidden,
        d_emb: c.d_emb,
        num_classes: c.num_classes,
        seed,
        epoch,
    };
    let mut w = ContainerWriter::new(CHECKPOINT_MAGIC, &header)?;
    w.f64s(&params.flatten());
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointHeader)> {
    let (mut r, h): (_, CheckpointHeader) = ContainerReader::open(bytes, CHECKPOINT_MAGIC)?;
    if h.schema_version != 1 {
        return Err(PcsrError::format(12, format!("unsupported schema {}", h.schema_version)));
    }
    let config = ModelConfig {
        d_img: h.d_img,
        d_txt: h.d_txt,
        hidden: h.hidden,
        d_emb: h.d_emb,
        num_classes: h.num_classes,
    };
    let mut params = ModelParams::init(config, &mut Rng::new(0))
        .map_err(|e| PcsrError::format(12, e.to_string()))?;
    let count = params.flatten().len();
    let values = r.f64s(count, "parameters")?;
    r.finish()?;
    params.load_flat(&values)?;
    Ok((params, h))
}

pub fn save_checkpoint(
    params: &ModelParams,
    seed: u64,
    epoch: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, seed, epoch)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointHeader)> {
    decode_checkpoint(&std::fs::read(path)?)
}
