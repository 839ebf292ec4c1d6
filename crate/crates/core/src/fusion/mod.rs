//! Conditioning core: single-head cross-attention from phonemes to semantic
//! tokens, additive prosody-exemplar modulation, and a LoRA-adapted linear
//! layer in front of the semantic stream.
//!
//! Shapes, with `T_p` phonemes and `T_t` semantic tokens:
//!
//! ```text
//! Q = E_p W_q            T_p x d_k
//! K = E_s W_k            T_t x d_k
//! V = E_s W_v            T_t x d_v
//! A = softmax(Q K^T / sqrt(d_k))
//! H = A V                T_p x d_v
//! Z = H + 1 (c * sum_k e_k W_w)      c = 1 (sum) or 1/K (mean)
//! ```
//!
//! In the full pipeline `E_s = X (W_base + (alpha / r) A B)` for raw
//! semantic features `X`; only `A` and `B` are trained.

mod backward;
mod gradcheck;
mod io;

pub use backward::{fusion_backward, mse_loss, train_step_toy, Gradients, TrainingExample};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use io::{load_params, save_params, PARAMS_MANIFEST};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, Matrix, Vector};
use crate::prosody::ProsodyEmbedding;
use crate::retrieval::SemanticEmbedding;

/// Per-phoneme query embeddings, `T_p x d_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeEmbedding(Matrix);

impl PhonemeEmbedding {
    pub fn new(values: Matrix) -> Self {
        Self(values)
    }

    pub fn seq_len(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }
}

/// How the projected exemplars are combined before being added to `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExemplarMode {
    /// Plain sum over exemplars.
    #[default]
    Sum,
    /// Sum divided by the number of exemplars.
    Mean,
}

impl ExemplarMode {
    fn weight(self, k: usize) -> f64 {
        match self {
            ExemplarMode::Sum => 1.0,
            ExemplarMode::Mean => 1.0 / k.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionDims {
    pub d_p: usize,
    pub d_t: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_w: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        Self {
            d_p: 8,
            d_t: 8,
            d_k: 8,
            d_v: 8,
            d_w: 4,
        }
    }
}

/// Learned projections of the attention block and the exemplar projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub(crate) w_q: Matrix,
    pub(crate) w_k: Matrix,
    pub(crate) w_v: Matrix,
    pub(crate) w_w: Matrix,
}

impl FusionParams {
    /// `w_q: d_p x d_k`, `w_k: d_t x d_k`, `w_v: d_t x d_v`, `w_w: d_w x d_v`.
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_w: Matrix) -> Result<Self> {
        if w_q.cols() != w_k.cols() {
            return Err(Error::Dimension(format!(
                "W_q projects to {} key dims but W_k to {}",
                w_q.cols(),
                w_k.cols()
            )));
        }
        if w_k.rows() != w_v.rows() {
            return Err(Error::Dimension(format!(
                "W_k expects {}-dim semantic input but W_v expects {}",
                w_k.rows(),
                w_v.rows()
            )));
        }
        if w_w.cols() != w_v.cols() {
            return Err(Error::Dimension(format!(
                "W_w maps to {} dims but values have {}",
                w_w.cols(),
                w_v.cols()
            )));
        }
        Ok(Self { w_q, w_k, w_v, w_w })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in being the row count.
    pub fn init(dims: FusionDims, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            uniform_init(dims.d_p, dims.d_k, rng)?,
            uniform_init(dims.d_t, dims.d_k, rng)?,
            uniform_init(dims.d_t, dims.d_v, rng)?,
            uniform_init(dims.d_w, dims.d_v, rng)?,
        )
    }

    pub fn dims(&self) -> FusionDims {
        FusionDims {
            d_p: self.w_q.rows(),
            d_t: self.w_k.rows(),
            d_k: self.w_q.cols(),
            d_v: self.w_v.cols(),
            d_w: self.w_w.rows(),
        }
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn w_w(&self) -> &Matrix {
        &self.w_w
    }
}

pub(crate) fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Parameter(format!(
            "cannot initialize a {rows}x{cols} weight"
        )));
    }
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Frozen base weight plus a trainable rank-`r` update `(alpha / r) A B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base: Matrix,
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// Rank used when none is given.
    pub const DEFAULT_RANK: usize = 8;

    pub fn new(base: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.cols();
        if a.rows() != base.rows() || b.cols() != base.cols() || b.rows() != rank {
            return Err(Error::Dimension(format!(
                "LoRA shapes base {}x{}, A {}x{}, B {}x{} are inconsistent",
                base.rows(),
                base.cols(),
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if rank > base.rows().min(base.cols()) {
            return Err(Error::Parameter(format!(
                "rank {rank} exceeds min({}, {})",
                base.rows(),
                base.cols()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Parameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            base,
            a,
            b,
            rank,
            alpha,
        })
    }

    /// Random base and `A`, zero `B`, so the adapted layer starts equal to
    /// the base layer.
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = uniform_init(d_in, d_out, rng)?;
        let a = uniform_init(d_in, rank, rng)?;
        let b = Matrix::zeros(rank, d_out)?;
        Self::new(base, a, b, alpha)
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_in(&self) -> usize {
        self.base.rows()
    }

    pub fn d_out(&self) -> usize {
        self.base.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) A B`.
    pub fn delta(&self) -> Matrix {
        matmul(&self.a, &self.b)
            .and_then(|ab| ab.scale(self.scaling()))
            .expect("adapter shapes are validated at construction")
    }

    pub fn effective_weight(&self) -> Matrix {
        self.base
            .add(&self.delta())
            .expect("delta has the base shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// Attention output, `T_p x d_v`.
    pub h: Matrix,
    /// Attention weights, `T_p x T_t`; rows sum to one.
    pub attn: Matrix,
    /// Conditioned hidden states, `T_p x d_v`.
    pub z: Matrix,
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Matrix,
    pub h: Matrix,
}

pub(crate) fn attention_trace(
    e_p: &Matrix,
    e_s: &Matrix,
    p: &FusionParams,
) -> Result<AttentionTrace> {
    if e_p.cols() != p.w_q.rows() {
        return Err(Error::Dimension(format!(
            "phoneme dim {} does not match W_q input dim {}",
            e_p.cols(),
            p.w_q.rows()
        )));
    }
    if e_s.cols() != p.w_k.rows() {
        return Err(Error::Dimension(format!(
            "semantic dim {} does not match W_k input dim {}",
            e_s.cols(),
            p.w_k.rows()
        )));
    }
    let q = matmul(e_p, &p.w_q)?;
    let k = matmul(e_s, &p.w_k)?;
    let v = matmul(e_s, &p.w_v)?;
    let scores = matmul(&q, &k.transpose())?.scale(1.0 / (q.cols() as f64).sqrt())?;
    let attn = softmax_rows(&scores);
    let h = matmul(&attn, &v)?;
    Ok(AttentionTrace { q, k, v, attn, h })
}

/// Returns `(H, attention weights)`.
pub fn cross_attention_forward(
    e_p: &PhonemeEmbedding,
    e_s: &SemanticEmbedding,
    p: &FusionParams,
) -> Result<(Matrix, Matrix)> {
    let t = attention_trace(e_p.values(), e_s.values(), p)?;
    Ok((t.h, t.attn))
}

/// Combined exemplar offset `c * sum_k e_k W_w`, or `None` without exemplars.
pub(crate) fn exemplar_offset(
    exemplars: &[ProsodyEmbedding],
    w_w: &Matrix,
    mode: ExemplarMode,
) -> Result<Option<Vector>> {
    let Some(first) = exemplars.first() else {
        return Ok(None);
    };
    let mut total = vec![0.0; first.dim()];
    for e in exemplars {
        if e.dim() != w_w.rows() {
            return Err(Error::Dimension(format!(
                "exemplar has dim {} but W_w expects {}",
                e.dim(),
                w_w.rows()
            )));
        }
        for (t, x) in total.iter_mut().zip(e.values().as_slice()) {
            *t += x;
        }
    }
    let c = mode.weight(exemplars.len());
    let summed = Matrix::new(1, total.len(), total.into_iter().map(|x| c * x).collect())?;
    let projected = matmul(&summed, w_w)?;
    Vector::new(projected.into_vec()).map(Some)
}

/// Adds the projected exemplars to every row of `h`. An empty exemplar
/// list leaves `h` unchanged.
pub fn prosody_condition(
    h: &Matrix,
    exemplars: &[ProsodyEmbedding],
    w_w: &Matrix,
    mode: ExemplarMode,
) -> Result<Matrix> {
    if w_w.cols() != h.cols() {
        return Err(Error::Dimension(format!(
            "W_w maps to {} dims but H has {} columns",
            w_w.cols(),
            h.cols()
        )));
    }
    match exemplar_offset(exemplars, w_w, mode)? {
        Some(offset) => h.add_row_broadcast(&offset),
        None => Ok(h.clone()),
    }
}

/// `x (W_base + (alpha / r) A B)`.
pub fn lora_forward(x: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if x.cols() != adapter.d_in() {
        return Err(Error::Dimension(format!(
            "input has {} columns, adapter expects {}",
            x.cols(),
            adapter.d_in()
        )));
    }
    matmul(x, &adapter.effective_weight())
}

/// Attention followed by exemplar conditioning.
pub fn fuse(
    e_p: &PhonemeEmbedding,
    e_s: &SemanticEmbedding,
    exemplars: &[ProsodyEmbedding],
    p: &FusionParams,
    mode: ExemplarMode,
) -> Result<FusionOutput> {
    let (h, attn) = cross_attention_forward(e_p, e_s, p)?;
    let z = prosody_condition(&h, exemplars, &p.w_w, mode)?;
    Ok(FusionOutput { h, attn, z })
}

/// Inputs of the full pipeline. `semantic_features` is the input of the
/// LoRA layer, whose output is the semantic embedding seen by attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    pub phonemes: PhonemeEmbedding,
    pub semantic_features: Matrix,
    pub exemplars: Vec<ProsodyEmbedding>,
}

/// LoRA layer, then [`fuse`].
pub fn pipeline_forward(
    inputs: &PipelineInputs,
    params: &FusionParams,
    adapter: &LoraAdapter,
    mode: ExemplarMode,
) -> Result<FusionOutput> {
    let e_s = SemanticEmbedding::new(lora_forward(&inputs.semantic_features, adapter)?);
    fuse(&inputs.phonemes, &e_s, &inputs.exemplars, params, mode)
}
