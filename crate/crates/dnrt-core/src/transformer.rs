//! Toy LLaMA-style decoder with norm fusion and rotation insertion.
//!
//! Each layer runs RMSNorm, causal multi-head attention (optionally with
//! rotary position embeddings on Q/K), a residual add, RMSNorm, a
//! SiLU-gated feed-forward block, and a second residual add. The module
//! supports fusing RMSNorm weights into the adjacent linears, applying a
//! trained [`RotationPair`] per layer with exact functional equivalence,
//! and merging the per-layer rotations into boundary matrices between
//! layers.
//!
//! Hidden states are stored as `hidden x positions` matrices (one column
//! per position), so every projection acts by left multiplication.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::RotationPair;
use crate::importance::ORTHO_TOL;
use crate::linalg::{LinalgError, Matrix};
use crate::random::{gaussian_matrix_scaled, seeded_rng};
use rand::Rng;

/// Epsilon inside the RMSNorm square root.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Errors raised while building or running models.
#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("hidden width {hidden_dim} must equal {n_heads} heads x {head_dim}")]
    HeadsTimesHeadDim { hidden_dim: usize, n_heads: usize, head_dim: usize },
    #[error("{which} must be at least 1")]
    ZeroCount { which: &'static str },
    #[error("rotary embeddings need an even head width, got {head_dim}")]
    OddRopeHeadDim { head_dim: usize },
    #[error("{name} must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    TensorShape {
        name: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{name} norm weight must have {expected} entries, got {got}")]
    NormLength { name: String, expected: usize, got: usize },
    #[error("layers disagree on fusion state: layer {layer} {state}")]
    MixedFusion { layer: usize, state: &'static str },
    #[error("final norm weight and layer norm weights disagree on fusion state")]
    MixedFinalFusion,
    #[error("model is already fused")]
    AlreadyFused,
    #[error("operation requires a fused model")]
    NotFused,
    #[error("{name} norm weight {value} at entry {index} is not positive")]
    NonPositiveNormWeight { name: String, index: usize, value: f64 },
    #[error("token {token} at position {position} exceeds vocabulary of {vocab}")]
    VocabOverflow { position: usize, token: u32, vocab: usize },
    #[error("sequences must contain at least one position")]
    EmptySequence,
    #[error("hidden input must have {expected} rows, got {got}")]
    HiddenRows { expected: usize, got: usize },
    #[error("expected {expected} rotation pairs, got {got}")]
    WrongPairCount { expected: usize, got: usize },
    #[error(
        "layer {layer} pair ({pair_hidden}, {pair_value}, {pair_heads} heads) does not fit \
         the model ({hidden}, {n_heads} heads)"
    )]
    PairDims {
        layer: usize,
        pair_hidden: usize,
        pair_value: usize,
        pair_heads: usize,
        hidden: usize,
        n_heads: usize,
    },
    #[error("layer {layer} {which} is not orthogonal: error {error}")]
    NonOrthogonalPair { layer: usize, which: &'static str, error: f64 },
    #[error("rotations are already merged")]
    AlreadyMerged,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Architecture of a toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_enabled: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_dim: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 172,
            vocab_size: 256,
            rope_enabled: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), TransformerError> {
        for (which, count) in [
            ("hidden-dim", self.hidden_dim),
            ("n-layers", self.n_layers),
            ("n-heads", self.n_heads),
            ("head-dim", self.head_dim),
            ("ffn-dim", self.ffn_dim),
            ("vocab-size", self.vocab_size),
        ] {
            if count == 0 {
                return Err(TransformerError::ZeroCount { which });
            }
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(TransformerError::HeadsTimesHeadDim {
                hidden_dim: self.hidden_dim,
                n_heads: self.n_heads,
                head_dim: self.head_dim,
            });
        }
        if self.rope_enabled && self.head_dim % 2 != 0 {
            return Err(TransformerError::OddRopeHeadDim { head_dim: self.head_dim });
        }
        Ok(())
    }
}

/// One decoder layer's weights; norm weights are present before fusion
/// and absent after.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub wgate: Matrix,
    pub wup: Matrix,
    pub wdown: Matrix,
    pub attn_norm: Option<Vec<f64>>,
    pub ffn_norm: Option<Vec<f64>>,
}

impl LayerWeights {
    fn is_fused(&self) -> bool {
        self.attn_norm.is_none() && self.ffn_norm.is_none()
    }
}

/// A toy decoder, either pre-fusion (norm weights explicit) or fused.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    /// One row per vocabulary entry.
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    /// Final norm weight; absent once fused into the head.
    final_norm: Option<Vec<f64>>,
    lm_head: Matrix,
    fused: bool,
}

impl Model {
    /// Assembles a model from parts, validating every tensor shape and
    /// that fusion state is consistent across layers and the final norm.
    pub fn new(
        spec: ModelSpec,
        embedding: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Option<Vec<f64>>,
        lm_head: Matrix,
    ) -> Result<Self, TransformerError> {
        spec.validate()?;
        let d = spec.hidden_dim;
        check_shape("embedding", &embedding, spec.vocab_size, d)?;
        check_shape("lm_head", &lm_head, spec.vocab_size, d)?;
        if layers.len() != spec.n_layers {
            return Err(TransformerError::TensorShape {
                name: "layers".into(),
                expected_rows: spec.n_layers,
                expected_cols: 1,
                rows: layers.len(),
                cols: 1,
            });
        }
        let fused = layers.first().map(LayerWeights::is_fused).unwrap_or(true);
        for (index, layer) in layers.iter().enumerate() {
            check_shape(&format!("layers.{index}.wq"), &layer.wq, d, d)?;
            check_shape(&format!("layers.{index}.wk"), &layer.wk, d, d)?;
            check_shape(&format!("layers.{index}.wv"), &layer.wv, d, d)?;
            check_shape(&format!("layers.{index}.wo"), &layer.wo, d, d)?;
            check_shape(&format!("layers.{index}.wgate"), &layer.wgate, spec.ffn_dim, d)?;
            check_shape(&format!("layers.{index}.wup"), &layer.wup, spec.ffn_dim, d)?;
            check_shape(&format!("layers.{index}.wdown"), &layer.wdown, d, spec.ffn_dim)?;
            match (&layer.attn_norm, &layer.ffn_norm) {
                (Some(a), Some(f)) => {
                    if fused {
                        return Err(TransformerError::MixedFusion {
                            layer: index,
                            state: "still carries norm weights",
                        });
                    }
                    check_norm_len(&format!("layers.{index}.attn_norm"), a, d)?;
                    check_norm_len(&format!("layers.{index}.ffn_norm"), f, d)?;
                }
                (None, None) => {
                    if !fused {
                        return Err(TransformerError::MixedFusion {
                            layer: index,
                            state: "is missing norm weights",
                        });
                    }
                }
                _ => {
                    return Err(TransformerError::MixedFusion {
                        layer: index,
                        state: "carries exactly one of the two norm weights",
                    });
                }
            }
        }
        match &final_norm {
            Some(g) => {
                if fused {
                    return Err(TransformerError::MixedFinalFusion);
                }
                check_norm_len("final_norm", g, d)?;
            }
            None => {
                if !fused {
                    return Err(TransformerError::MixedFinalFusion);
                }
            }
        }
        Ok(Model { spec, embedding, layers, final_norm, lm_head, fused })
    }

    /// Random pre-fusion model: Gaussian linears scaled by `1/sqrt(fan-in)`
    /// and positive norm weights in `[0.75, 1.25]`.
    pub fn random(spec: ModelSpec, seed: u64) -> Result<Self, TransformerError> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let d = spec.hidden_dim;
        let scale_d = 1.0 / (d as f64).sqrt();
        let scale_f = 1.0 / (spec.ffn_dim as f64).sqrt();
        let embedding = gaussian_matrix_scaled(&mut rng, spec.vocab_size, d, 1.0);
        let mut layers = Vec::with_capacity(spec.n_layers);
        for _ in 0..spec.n_layers {
            let mut norm = |len: usize| -> Vec<f64> {
                (0..len).map(|_| 0.75 + 0.5 * rng.gen::<f64>()).collect()
            };
            let attn_norm = Some(norm(d));
            let ffn_norm = Some(norm(d));
            layers.push(LayerWeights {
                wq: gaussian_matrix_scaled(&mut rng, d, d, scale_d),
                wk: gaussian_matrix_scaled(&mut rng, d, d, scale_d),
                wv: gaussian_matrix_scaled(&mut rng, d, d, scale_d),
                wo: gaussian_matrix_scaled(&mut rng, d, d, scale_d),
                wgate: gaussian_matrix_scaled(&mut rng, spec.ffn_dim, d, scale_d),
                wup: gaussian_matrix_scaled(&mut rng, spec.ffn_dim, d, scale_d),
                wdown: gaussian_matrix_scaled(&mut rng, d, spec.ffn_dim, scale_f),
                attn_norm,
                ffn_norm,
            });
        }
        let final_norm = Some((0..d).map(|_| 0.75 + 0.5 * rng.gen::<f64>()).collect());
        let lm_head = gaussian_matrix_scaled(&mut rng, spec.vocab_size, d, scale_d);
        Model::new(spec, embedding, layers, final_norm, lm_head)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> Option<&[f64]> {
        self.final_norm.as_deref()
    }

    /// Folds every RMSNorm weight into the linears it feeds: `wq`, `wk`,
    /// `wv` absorb the attention norm, `wgate` and `wup` the FFN norm, and
    /// the LM head the final norm. The forward pass is unchanged.
    pub fn fuse_rmsnorm(&self) -> Result<Model, TransformerError> {
        if self.fused {
            return Err(TransformerError::AlreadyFused);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let attn = layer.attn_norm.as_ref().expect("unfused layers carry norm weights");
            let ffn = layer.ffn_norm.as_ref().expect("unfused layers carry norm weights");
            check_positive(&format!("layers.{index}.attn_norm"), attn)?;
            check_positive(&format!("layers.{index}.ffn_norm"), ffn)?;
            layers.push(LayerWeights {
                wq: scale_columns(&layer.wq, attn),
                wk: scale_columns(&layer.wk, attn),
                wv: scale_columns(&layer.wv, attn),
                wo: layer.wo.clone(),
                wgate: scale_columns(&layer.wgate, ffn),
                wup: scale_columns(&layer.wup, ffn),
                wdown: layer.wdown.clone(),
                attn_norm: None,
                ffn_norm: None,
            });
        }
        let final_norm = self.final_norm.as_ref().expect("unfused models carry a final norm");
        check_positive("final_norm", final_norm)?;
        let lm_head = scale_columns(&self.lm_head, final_norm);
        Model::new(self.spec, self.embedding.clone(), layers, None, lm_head)
    }

    /// Runs the decoder stack on a `hidden x positions` state, returning
    /// the residual stream after the last layer (no final norm or head).
    pub fn forward_hidden(&self, hidden: &Matrix) -> Result<Matrix, TransformerError> {
        if hidden.rows() != self.spec.hidden_dim {
            return Err(TransformerError::HiddenRows {
                expected: self.spec.hidden_dim,
                got: hidden.rows(),
            });
        }
        if hidden.cols() == 0 {
            return Err(TransformerError::EmptySequence);
        }
        let mut h = hidden.clone();
        for layer in &self.layers {
            h = layer_forward(&self.spec, layer, &h)?;
        }
        Ok(h)
    }

    /// Embeds a token sequence, runs the stack, applies the final norm,
    /// and returns `vocab x positions` logits.
    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<Matrix, TransformerError> {
        let h = self.embed(tokens)?;
        let h = self.forward_hidden(&h)?;
        self.head(&h)
    }

    /// Per-sequence forward over a batch; sequences never interact.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Matrix>, TransformerError> {
        batch.iter().map(|tokens| self.forward_tokens(tokens)).collect()
    }

    /// Token columns looked up from the embedding table.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix, TransformerError> {
        if tokens.is_empty() {
            return Err(TransformerError::EmptySequence);
        }
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.spec.vocab_size {
                return Err(TransformerError::VocabOverflow {
                    position,
                    token,
                    vocab: self.spec.vocab_size,
                });
            }
        }
        let d = self.spec.hidden_dim;
        Ok(Matrix::from_fn(d, tokens.len(), |i, t| self.embedding.at(tokens[t] as usize, i))
            .expect("finite embedding"))
    }

    /// Final norm plus LM head over a residual-stream state.
    pub fn head(&self, hidden: &Matrix) -> Result<Matrix, TransformerError> {
        let normed = rmsnorm(hidden, self.final_norm.as_deref());
        Ok(self.lm_head.matmul(&normed)?)
    }
}

fn check_shape(
    name: &str,
    m: &Matrix,
    rows: usize,
    cols: usize,
) -> Result<(), TransformerError> {
    if m.dims() != (rows, cols) {
        return Err(TransformerError::TensorShape {
            name: name.to_string(),
            expected_rows: rows,
            expected_cols: cols,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(())
}

fn check_norm_len(name: &str, v: &[f64], expected: usize) -> Result<(), TransformerError> {
    if v.len() != expected {
        return Err(TransformerError::NormLength {
            name: name.to_string(),
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_positive(name: &str, v: &[f64]) -> Result<(), TransformerError> {
    for (index, &value) in v.iter().enumerate() {
        if !(value > 0.0) {
            return Err(TransformerError::NonPositiveNormWeight {
                name: name.to_string(),
                index,
                value,
            });
        }
    }
    Ok(())
}

/// `w * diag(g)`: scales column `j` of `w` by `g[j]`.
fn scale_columns(w: &Matrix, g: &[f64]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |i, j| w.at(i, j) * g[j]).expect("finite scaled weight")
}

/// Column-wise RMSNorm with optional per-dimension weight.
fn rmsnorm(h: &Matrix, weight: Option<&[f64]>) -> Matrix {
    let d = h.rows();
    let mut out = Matrix::zeros(d, h.cols());
    for t in 0..h.cols() {
        let mut sum_sq = 0.0;
        for i in 0..d {
            let x = h.at(i, t);
            sum_sq += x * x;
        }
        let rms = (sum_sq / d as f64 + RMSNORM_EPS).sqrt();
        for i in 0..d {
            let mut v = h.at(i, t) / rms;
            if let Some(g) = weight {
                v *= g[i];
            }
            out.set(i, t, v);
        }
    }
    out
}

/// SiLU activation `x * sigmoid(x)`.
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One decoder layer: norm, causal attention, residual, norm, gated FFN,
/// residual.
fn layer_forward(
    spec: &ModelSpec,
    layer: &LayerWeights,
    h: &Matrix,
) -> Result<Matrix, TransformerError> {
    let normed = rmsnorm(h, layer.attn_norm.as_deref());
    let attn = attention(spec, layer, &normed)?;
    let h = h.add(&attn)?;
    let normed = rmsnorm(&h, layer.ffn_norm.as_deref());
    let gate = layer.wgate.matmul(&normed)?;
    let up = layer.wup.matmul(&normed)?;
    let mixed = Matrix::from_fn(gate.rows(), gate.cols(), |i, j| silu(gate.at(i, j)) * up.at(i, j))
        .expect("finite ffn activation");
    let ffn = layer.wdown.matmul(&mixed)?;
    Ok(h.add(&ffn)?)
}

/// Causal multi-head attention over one sequence.
///
/// Position `t`'s softmax only ever reads keys at positions `s <= t`, so
/// the outputs for a prefix are bit-identical to running the prefix alone.
fn attention(
    spec: &ModelSpec,
    layer: &LayerWeights,
    normed: &Matrix,
) -> Result<Matrix, TransformerError> {
    let t_len = normed.cols();
    let hd = spec.head_dim;
    let mut q = layer.wq.matmul(normed)?;
    let mut k = layer.wk.matmul(normed)?;
    let v = layer.wv.matmul(normed)?;
    if spec.rope_enabled {
        apply_rope(&mut q, hd);
        apply_rope(&mut k, hd);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = Matrix::zeros(spec.hidden_dim, t_len);
    let mut scores = vec![0.0f64; t_len];
    for head in 0..spec.n_heads {
        let base = head * hd;
        for t in 0..t_len {
            for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                let mut dot = 0.0;
                for i in 0..hd {
                    dot += q.at(base + i, t) * k.at(base + i, s);
                }
                *score = dot * scale;
            }
            let mut max = f64::NEG_INFINITY;
            for &s in scores.iter().take(t + 1) {
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for score in scores.iter_mut().take(t + 1) {
                *score = (*score - max).exp();
                denom += *score;
            }
            for i in 0..hd {
                let mut acc = 0.0;
                for (s, &p) in scores.iter().enumerate().take(t + 1) {
                    acc += p * v.at(base + i, s);
                }
                mixed.set(base + i, t, acc / denom);
            }
        }
    }
    Ok(layer.wo.matmul(&mixed)?)
}

/// Rotates query/key pairs `(2i, 2i+1)` of every head by the position
/// angle `pos * 10000^(-2i/head_dim)`.
fn apply_rope(x: &mut Matrix, head_dim: usize) {
    let n_heads = x.rows() / head_dim;
    for head in 0..n_heads {
        let base = head * head_dim;
        for pair in 0..head_dim / 2 {
            let theta = 10000f64.powf(-2.0 * pair as f64 / head_dim as f64);
            for t in 0..x.cols() {
                let angle = t as f64 * theta;
                let (sin, cos) = angle.sin_cos();
                let a = x.at(base + 2 * pair, t);
                let b = x.at(base + 2 * pair + 1, t);
                x.set(base + 2 * pair, t, a * cos - b * sin);
                x.set(base + 2 * pair + 1, t, a * sin + b * cos);
            }
        }
    }
}

/// Whether per-layer rotations are still bracketed explicitly or have
/// been merged into boundary matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Each layer rotates the stream in with `q1^T` and back out with `q1`.
    Explicit,
    /// Adjacent in/out rotations are combined into `n_layers + 1`
    /// boundary matrices.
    Merged,
}

/// A fused model whose weights carry per-layer rotations.
#[derive(Debug, Clone)]
pub struct RotatedModel {
    model: Model,
    pairs: Vec<RotationPair>,
    mode: RotationMode,
    /// Present in merged mode: `n_layers + 1` matrices.
    boundaries: Option<Vec<Matrix>>,
}

/// Rotates every projection of a fused model by its layer's pair.
///
/// Query, key, gate, and up absorb `q1` on the input side, down absorbs
/// `q1^T` on the output side, and value/output sandwich `q2` so the
/// per-head attention mix stays equivalent. The returned model computes
/// the same function as the input model.
pub fn apply_rotations(
    model: &Model,
    pairs: &[RotationPair],
) -> Result<RotatedModel, TransformerError> {
    if !model.fused {
        return Err(TransformerError::NotFused);
    }
    let spec = model.spec;
    if pairs.len() != spec.n_layers {
        return Err(TransformerError::WrongPairCount {
            expected: spec.n_layers,
            got: pairs.len(),
        });
    }
    for (layer, pair) in pairs.iter().enumerate() {
        if pair.hidden_dim() != spec.hidden_dim
            || pair.value_dim() != spec.hidden_dim
            || pair.n_heads() != spec.n_heads
        {
            return Err(TransformerError::PairDims {
                layer,
                pair_hidden: pair.hidden_dim(),
                pair_value: pair.value_dim(),
                pair_heads: pair.n_heads(),
                hidden: spec.hidden_dim,
                n_heads: spec.n_heads,
            });
        }
        let e1 = pair.q1().orthogonality_error();
        if e1 > ORTHO_TOL {
            return Err(TransformerError::NonOrthogonalPair { layer, which: "q1", error: e1 });
        }
        let e2 = pair.q2().orthogonality_error();
        if e2 > ORTHO_TOL {
            return Err(TransformerError::NonOrthogonalPair { layer, which: "q2", error: e2 });
        }
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, pair) in model.layers.iter().zip(pairs) {
        let q1 = pair.q1();
        let q2 = pair.q2();
        let q1t = q1.transpose();
        let q2t = q2.transpose();
        layers.push(LayerWeights {
            wq: layer.wq.matmul(q1)?,
            wk: layer.wk.matmul(q1)?,
            wv: q2t.matmul(&layer.wv.matmul(q1)?)?,
            wo: q1t.matmul(&layer.wo.matmul(q2)?)?,
            wgate: layer.wgate.matmul(q1)?,
            wup: layer.wup.matmul(q1)?,
            wdown: q1t.matmul(&layer.wdown)?,
            attn_norm: None,
            ffn_norm: None,
        });
    }
    let rotated = Model::new(
        spec,
        model.embedding.clone(),
        layers,
        None,
        model.lm_head.clone(),
    )?;
    Ok(RotatedModel { model: rotated, pairs: pairs.to_vec(), mode: RotationMode::Explicit, boundaries: None })
}

/// Collapses the per-layer in/out rotations of an explicit-mode model
/// into `n_layers + 1` boundary matrices.
///
/// Boundary 0 is `q1_0^T`, boundary `i` is `q1_i^T * q1_{i-1}` for the
/// seams between layers, and the last boundary is `q1_{L-1}` returning
/// the stream to the original basis.
pub fn merge_rotations(rotated: &RotatedModel) -> Result<RotatedModel, TransformerError> {
    if rotated.mode == RotationMode::Merged {
        return Err(TransformerError::AlreadyMerged);
    }
    let pairs = &rotated.pairs;
    let n = pairs.len();
    let mut boundaries = Vec::with_capacity(n + 1);
    boundaries.push(pairs[0].q1().transpose());
    for i in 1..n {
        boundaries.push(pairs[i].q1().transpose().matmul(pairs[i - 1].q1())?);
    }
    boundaries.push(pairs[n - 1].q1().clone());
    Ok(RotatedModel {
        model: rotated.model.clone(),
        pairs: pairs.clone(),
        mode: RotationMode::Merged,
        boundaries: Some(boundaries),
    })
}

/// Stored boundary entries after merging: `(n_layers + 1) * hidden^2`.
pub fn boundary_param_count(n_layers: usize, hidden_dim: usize) -> usize {
    (n_layers + 1) * hidden_dim * hidden_dim
}

impl RotatedModel {
    pub fn mode(&self) -> RotationMode {
        self.mode
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pairs(&self) -> &[RotationPair] {
        &self.pairs
    }

    /// Boundary matrices; present only in merged mode.
    pub fn boundaries(&self) -> Option<&[Matrix]> {
        self.boundaries.as_deref()
    }

    /// Residual stream after the last layer, in the original basis.
    pub fn forward_hidden(&self, hidden: &Matrix) -> Result<Matrix, TransformerError> {
        if hidden.rows() != self.model.spec.hidden_dim {
            return Err(TransformerError::HiddenRows {
                expected: self.model.spec.hidden_dim,
                got: hidden.rows(),
            });
        }
        if hidden.cols() == 0 {
            return Err(TransformerError::EmptySequence);
        }
        let mut h = hidden.clone();
        match self.mode {
            RotationMode::Explicit => {
                for (layer, pair) in self.model.layers.iter().zip(&self.pairs) {
                    h = pair.q1().transpose().matmul(&h)?;
                    h = layer_forward(&self.model.spec, layer, &h)?;
                    h = pair.q1().matmul(&h)?;
                }
            }
            RotationMode::Merged => {
                let boundaries = self.boundaries.as_ref().expect("merged mode stores boundaries");
                for (i, layer) in self.model.layers.iter().enumerate() {
                    h = boundaries[i].matmul(&h)?;
                    h = layer_forward(&self.model.spec, layer, &h)?;
                }
                h = boundaries[self.model.layers.len()].matmul(&h)?;
            }
        }
        Ok(h)
    }

    /// Embeds, runs the rotated stack, and projects to logits.
    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<Matrix, TransformerError> {
        let h = self.model.embed(tokens)?;
        let h = self.forward_hidden(&h)?;
        self.model.head(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{train_rotations, BundleEntry, LayerBundle, LinearKind, TrainConfig};
    use crate::importance::Metric;
    use crate::random::{gaussian_matrix, random_orthogonal};

    fn tiny_spec(rope: bool) -> ModelSpec {
        ModelSpec {
            hidden_dim: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 24,
            vocab_size: 32,
            rope_enabled: rope,
        }
    }

    fn random_pairs(spec: &ModelSpec, seed: u64) -> Vec<RotationPair> {
        let mut rng = seeded_rng(seed);
        (0..spec.n_layers)
            .map(|_| {
                let q1 = random_orthogonal(&mut rng, spec.hidden_dim);
                let blocks: Vec<Matrix> =
                    (0..spec.n_heads).map(|_| random_orthogonal(&mut rng, spec.head_dim)).collect();
                let q2 = crate::denoiser::make_block_diagonal(&blocks).unwrap();
                RotationPair::from_factors(q1, q2, spec.n_heads, 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn spec_validation_catches_inconsistencies() {
        let mut spec = tiny_spec(true);
        spec.head_dim = 7;
        assert!(matches!(
            spec.validate(),
            Err(TransformerError::HeadsTimesHeadDim { .. })
        ));
        spec.hidden_dim = 14;
        assert!(matches!(spec.validate(), Err(TransformerError::OddRopeHeadDim { head_dim: 7 })));
        spec.rope_enabled = false;
        assert!(spec.validate().is_ok());
        spec.n_layers = 0;
        assert!(matches!(spec.validate(), Err(TransformerError::ZeroCount { which: "n-layers" })));
    }

    #[test]
    fn all_ones_norm_fuses_to_bit_identical_weights() {
        let spec = tiny_spec(false);
        let mut model = Model::random(spec, 1).unwrap();
        for layer in &mut model.layers {
            layer.attn_norm = Some(vec![1.0; spec.hidden_dim]);
            layer.ffn_norm = Some(vec![1.0; spec.hidden_dim]);
        }
        model.final_norm = Some(vec![1.0; spec.hidden_dim]);
        let fused = model.fuse_rmsnorm().unwrap();
        for (a, b) in model.layers.iter().zip(fused.layers.iter()) {
            assert_eq!(a.wq.max_abs_diff(&b.wq), 0.0);
            assert_eq!(a.wgate.max_abs_diff(&b.wgate), 0.0);
            assert_eq!(a.wdown.max_abs_diff(&b.wdown), 0.0);
        }
        assert_eq!(model.lm_head.max_abs_diff(&fused.lm_head), 0.0);
        assert!(fused.is_fused());
    }

    #[test]
    fn doubled_norm_doubles_the_consuming_weights() {
        let spec = tiny_spec(false);
        let mut model = Model::random(spec, 2).unwrap();
        model.layers[0].attn_norm = Some(vec![2.0; spec.hidden_dim]);
        let fused = model.fuse_rmsnorm().unwrap();
        let expected = model.layers[0].wq.scale(2.0);
        assert!(fused.layers[0].wq.max_abs_diff(&expected) <= 1e-15);
    }

    #[test]
    fn fused_forward_matches_unfused_forward() {
        for rope in [false, true] {
            let spec = tiny_spec(rope);
            let model = Model::random(spec, 3).unwrap();
            let fused = model.fuse_rmsnorm().unwrap();
            let mut rng = seeded_rng(30);
            for _ in 0..8 {
                let len = 1 + rng.gen_range(0..6);
                let tokens: Vec<u32> =
                    (0..len).map(|_| rng.gen_range(0..spec.vocab_size as u32)).collect();
                let dense = model.forward_tokens(&tokens).unwrap();
                let via_fused = fused.forward_tokens(&tokens).unwrap();
                let scale = dense.max_abs().max(1.0);
                assert!(
                    dense.max_abs_diff(&via_fused) / scale <= 1e-12,
                    "fusion changed the forward pass (rope {rope})"
                );
            }
        }
    }

    #[test]
    fn double_fusion_is_rejected() {
        let model = Model::random(tiny_spec(false), 4).unwrap();
        let fused = model.fuse_rmsnorm().unwrap();
        assert!(matches!(fused.fuse_rmsnorm(), Err(TransformerError::AlreadyFused)));
    }

    #[test]
    fn non_positive_norm_weight_is_rejected() {
        let spec = tiny_spec(false);
        let mut model = Model::random(spec, 5).unwrap();
        model.layers[1].ffn_norm.as_mut().unwrap()[3] = 0.0;
        match model.fuse_rmsnorm() {
            Err(TransformerError::NonPositiveNormWeight { index: 3, .. }) => {}
            other => panic!("expected NonPositiveNormWeight, got {other:?}"),
        }
    }

    #[test]
    fn zero_layer_passes_residual_through_unchanged() {
        let spec = ModelSpec { n_layers: 1, ..tiny_spec(false) };
        let d = spec.hidden_dim;
        let zero_layer = LayerWeights {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            wgate: Matrix::zeros(spec.ffn_dim, d),
            wup: Matrix::zeros(spec.ffn_dim, d),
            wdown: Matrix::zeros(d, spec.ffn_dim),
            attn_norm: None,
            ffn_norm: None,
        };
        let model = Model::new(
            spec,
            Matrix::zeros(spec.vocab_size, d),
            vec![zero_layer],
            None,
            Matrix::zeros(spec.vocab_size, d),
        )
        .unwrap();
        let input = gaussian_matrix(&mut seeded_rng(6), d, 3);
        let output = model.forward_hidden(&input).unwrap();
        assert_eq!(output.max_abs_diff(&input), 0.0);
    }

    #[test]
    fn causal_prefix_logits_are_bit_identical() {
        for rope in [false, true] {
            let spec = tiny_spec(rope);
            let model = Model::random(spec, 7).unwrap().fuse_rmsnorm().unwrap();
            let tokens: Vec<u32> = vec![5, 1, 30, 12, 9, 2];
            let full = model.forward_tokens(&tokens).unwrap();
            let prefix = model.forward_tokens(&tokens[..3]).unwrap();
            for p in 0..3 {
                for v in 0..spec.vocab_size {
                    assert_eq!(
                        full.at(v, p).to_bits(),
                        prefix.at(v, p).to_bits(),
                        "position {p} vocab {v} (rope {rope})"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_entries_do_not_interact() {
        let spec = tiny_spec(true);
        let model = Model::random(spec, 8).unwrap().fuse_rmsnorm().unwrap();
        let solo = model.forward_batch(&[vec![3, 14, 15]]).unwrap();
        let batch = model
            .forward_batch(&[vec![9, 2, 6], vec![3, 14, 15], vec![1]])
            .unwrap();
        assert_eq!(solo[0].max_abs_diff(&batch[1]), 0.0);
    }

    #[test]
    fn forward_matches_a_straight_line_reimplementation() {
        let spec = tiny_spec(false);
        let model = Model::random(spec, 9).unwrap().fuse_rmsnorm().unwrap();
        let tokens: Vec<u32> = vec![4, 31, 17, 0, 22];
        let fast = model.forward_tokens(&tokens).unwrap();
        let slow = straight_line_forward(&model, &tokens);
        let scale = fast.max_abs().max(1.0);
        assert!(
            fast.max_abs_diff(&slow) / scale <= 1e-10,
            "reimplementation disagrees by {}",
            fast.max_abs_diff(&slow)
        );
    }

    /// Independent scalar-loop forward used as an oracle; softmax is
    /// computed without max subtraction so the arithmetic differs.
    fn straight_line_forward(model: &Model, tokens: &[u32]) -> Matrix {
        let spec = model.spec;
        let d = spec.hidden_dim;
        let t_len = tokens.len();
        let mut h: Vec<Vec<f64>> = (0..t_len)
            .map(|t| (0..d).map(|i| model.embedding.at(tokens[t] as usize, i)).collect())
            .collect();
        let norm = |x: &[f64]| -> Vec<f64> {
            let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let rms = (ms + RMSNORM_EPS).sqrt();
            x.iter().map(|v| v / rms).collect()
        };
        let matvec = |w: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|i| (0..w.cols()).map(|j| w.at(i, j) * x[j]).sum())
                .collect()
        };
        for layer in &model.layers {
            let normed: Vec<Vec<f64>> = h.iter().map(|x| norm(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&layer.wq, x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&layer.wk, x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&layer.wv, x)).collect();
            let mut mixed = vec![vec![0.0; d]; t_len];
            for head in 0..spec.n_heads {
                let base = head * spec.head_dim;
                for t in 0..t_len {
                    let mut weights = Vec::new();
                    for s in 0..=t {
                        let dot: f64 = (0..spec.head_dim)
                            .map(|i| q[t][base + i] * k[s][base + i])
                            .sum();
                        weights.push((dot / (spec.head_dim as f64).sqrt()).exp());
                    }
                    let total: f64 = weights.iter().sum();
                    for i in 0..spec.head_dim {
                        let mut acc = 0.0;
                        for s in 0..=t {
                            acc += weights[s] / total * v[s][base + i];
                        }
                        mixed[t][base + i] = acc;
                    }
                }
            }
            for t in 0..t_len {
                let o = matvec(&layer.wo, &mixed[t]);
                for i in 0..d {
                    h[t][i] += o[i];
                }
            }
            let normed: Vec<Vec<f64>> = h.iter().map(|x| norm(x)).collect();
            for t in 0..t_len {
                let gate = matvec(&layer.wgate, &normed[t]);
                let up = matvec(&layer.wup, &normed[t]);
                let act: Vec<f64> = gate
                    .iter()
                    .zip(&up)
                    .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                    .collect();
                let down = matvec(&layer.wdown, &act);
                for i in 0..d {
                    h[t][i] += down[i];
                }
            }
        }
        let mut logits = Matrix::zeros(spec.vocab_size, t_len);
        for t in 0..t_len {
            let normed = norm(&h[t]);
            let row = matvec(&model.lm_head, &normed);
            for (vcb, &val) in row.iter().enumerate() {
                logits.set(vcb, t, val);
            }
        }
        logits
    }

    #[test]
    fn rmsnorm_commutes_with_orthogonal_rotation() {
        let mut rng = seeded_rng(10);
        let r = random_orthogonal(&mut rng, 12);
        let x = gaussian_matrix(&mut rng, 12, 5);
        let lhs = rmsnorm(&r.matmul(&x).unwrap(), None);
        let rhs = r.matmul(&rmsnorm(&x, None)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn identity_pairs_leave_weights_bit_identical() {
        let spec = tiny_spec(false);
        let model = Model::random(spec, 11).unwrap().fuse_rmsnorm().unwrap();
        let pairs: Vec<RotationPair> = (0..spec.n_layers)
            .map(|_| RotationPair::identity(spec.hidden_dim, spec.hidden_dim, spec.n_heads, 1).unwrap())
            .collect();
        let rotated = apply_rotations(&model, &pairs).unwrap();
        for (a, b) in model.layers.iter().zip(rotated.model.layers.iter()) {
            assert_eq!(a.wq.max_abs_diff(&b.wq), 0.0);
            assert_eq!(a.wv.max_abs_diff(&b.wv), 0.0);
            assert_eq!(a.wo.max_abs_diff(&b.wo), 0.0);
            assert_eq!(a.wdown.max_abs_diff(&b.wdown), 0.0);
        }
        let merged = merge_rotations(&rotated).unwrap();
        for boundary in merged.boundaries().unwrap() {
            assert_eq!(boundary.max_abs_diff(&Matrix::identity(spec.hidden_dim)), 0.0);
        }
    }

    #[test]
    fn random_rotations_preserve_the_forward_pass() {
        for rope in [false, true] {
            let spec = tiny_spec(rope);
            let model = Model::random(spec, 12).unwrap().fuse_rmsnorm().unwrap();
            let pairs = random_pairs(&spec, 13);
            let rotated = apply_rotations(&model, &pairs).unwrap();
            let merged = merge_rotations(&rotated).unwrap();
            let mut rng = seeded_rng(14);
            for _ in 0..16 {
                let x = gaussian_matrix(&mut rng, spec.hidden_dim, 4);
                let dense = model.forward_hidden(&x).unwrap();
                let explicit = rotated.forward_hidden(&x).unwrap();
                let via_merged = merged.forward_hidden(&x).unwrap();
                assert!(
                    dense.max_abs_diff(&explicit) <= 1e-9,
                    "explicit drift {} (rope {rope})",
                    dense.max_abs_diff(&explicit)
                );
                assert!(
                    explicit.max_abs_diff(&via_merged) <= 1e-10,
                    "merge drift {} (rope {rope})",
                    explicit.max_abs_diff(&via_merged)
                );
            }
            let tokens: Vec<u32> = vec![1, 9, 27, 30];
            let dense = model.forward_tokens(&tokens).unwrap();
            let explicit = rotated.forward_tokens(&tokens).unwrap();
            assert!(dense.max_abs_diff(&explicit) <= 1e-9);
        }
    }

    #[test]
    fn trained_pairs_also_preserve_the_forward_pass() {
        let spec = tiny_spec(true);
        let model = Model::random(spec, 15).unwrap().fuse_rmsnorm().unwrap();
        let mut rng = seeded_rng(16);
        let pairs: Vec<RotationPair> = (0..spec.n_layers)
            .map(|i| {
                let mut entries = Vec::new();
                let layer = &model.layers[i];
                for (kind, w) in [
                    (LinearKind::Query, &layer.wq),
                    (LinearKind::Key, &layer.wk),
                    (LinearKind::Value, &layer.wv),
                    (LinearKind::Output, &layer.wo),
                    (LinearKind::Gate, &layer.wgate),
                    (LinearKind::Up, &layer.wup),
                    (LinearKind::Down, &layer.wdown),
                ] {
                    let dim = w.cols();
                    let x = gaussian_matrix(&mut rng, dim, 2 * dim);
                    let h = x.matmul(&x.transpose()).unwrap();
                    entries.push(BundleEntry::new(kind, w.clone(), h));
                }
                let bundle = LayerBundle::new(entries, Metric::Obd, spec.n_heads).unwrap();
                let config = TrainConfig { steps: 12, ..TrainConfig::default() };
                train_rotations(&bundle, &config).unwrap().pair
            })
            .collect();
        let rotated = apply_rotations(&model, &pairs).unwrap();
        let x = gaussian_matrix(&mut rng, spec.hidden_dim, 6);
        let dense = model.forward_hidden(&x).unwrap();
        let out = rotated.forward_hidden(&x).unwrap();
        assert!(out.max_abs_diff(&dense) <= 1e-9, "drift {}", out.max_abs_diff(&dense));
    }

    #[test]
    fn rotation_preconditions_are_enforced() {
        let spec = tiny_spec(false);
        let unfused = Model::random(spec, 17).unwrap();
        let pairs = random_pairs(&spec, 18);
        assert!(matches!(
            apply_rotations(&unfused, &pairs),
            Err(TransformerError::NotFused)
        ));
        let fused = unfused.fuse_rmsnorm().unwrap();
        assert!(matches!(
            apply_rotations(&fused, &pairs[..1]),
            Err(TransformerError::WrongPairCount { expected: 2, got: 1 })
        ));
        let bad_dims =
            vec![RotationPair::identity(8, 8, 2, 1).unwrap(), RotationPair::identity(8, 8, 2, 1).unwrap()];
        assert!(matches!(
            apply_rotations(&fused, &bad_dims),
            Err(TransformerError::PairDims { layer: 0, .. })
        ));
        let rotated = apply_rotations(&fused, &pairs).unwrap();
        let merged = merge_rotations(&rotated).unwrap();
        assert!(matches!(merge_rotations(&merged), Err(TransformerError::AlreadyMerged)));
    }

    #[test]
    fn boundary_count_covers_both_model_edges() {
        let spec = tiny_spec(false);
        let model = Model::random(spec, 19).unwrap().fuse_rmsnorm().unwrap();
        let pairs = random_pairs(&spec, 20);
        let merged = merge_rotations(&apply_rotations(&model, &pairs).unwrap()).unwrap();
        let boundaries = merged.boundaries().unwrap();
        assert_eq!(boundaries.len(), spec.n_layers + 1);
        assert_eq!(
            boundary_param_count(spec.n_layers, spec.hidden_dim),
            boundaries.len() * spec.hidden_dim * spec.hidden_dim
        );
    }

    #[test]
    fn vocab_overflow_is_rejected() {
        let model = Model::random(tiny_spec(false), 21).unwrap().fuse_rmsnorm().unwrap();
        match model.forward_tokens(&[1, 99]) {
            Err(TransformerError::VocabOverflow { position: 1, token: 99, vocab: 32 }) => {}
            other => panic!("expected VocabOverflow, got {other:?}"),
        }
    }
}
