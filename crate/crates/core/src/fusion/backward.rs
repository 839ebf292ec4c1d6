use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Vector};

use super::{
    attention_trace, lora_forward, pipeline_forward, ExemplarMode, FusionParams, LoraAdapter,
    PipelineInputs,
};

/// Gradients of a scalar loss with respect to every pipeline input and
/// parameter. `lora_base` is reported but never applied by training.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub phonemes: Matrix,
    /// With respect to the semantic embedding entering attention.
    pub semantic: Matrix,
    /// With respect to the LoRA layer input.
    pub semantic_features: Matrix,
    pub exemplars: Vec<Vector>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_w: Matrix,
    pub lora_a: Matrix,
    pub lora_b: Matrix,
    pub lora_base: Matrix,
}

/// Backpropagates `upstream = dL/dZ` through the LoRA layer, attention and
/// exemplar conditioning.
pub fn fusion_backward(
    inputs: &PipelineInputs,
    params: &FusionParams,
    adapter: &LoraAdapter,
    mode: ExemplarMode,
    upstream: &Matrix,
) -> Result<Gradients> {
    let x = &inputs.semantic_features;
    let p = inputs.phonemes.values();
    let s = lora_forward(x, adapter)?;
    let t = attention_trace(p, &s, params)?;
    if upstream.shape() != t.h.shape() {
        return Err(Error::Dimension(format!(
            "upstream gradient is {}x{}, output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            t.h.rows(),
            t.h.cols()
        )));
    }

    // exemplar branch: Z = H + 1 (c * sum_k e_k) W_w
    let g_cols = upstream.column_sums();
    let (w_w_grad, exemplar_grads) = match inputs.exemplars.first() {
        None => (
            Matrix::zeros(params.w_w.rows(), params.w_w.cols())?,
            Vec::new(),
        ),
        Some(first) => {
            let c = mode.weight(inputs.exemplars.len());
            let mut summed = vec![0.0; first.dim()];
            for e in &inputs.exemplars {
                if e.dim() != params.w_w.rows() {
                    return Err(Error::Dimension(format!(
                        "exemplar has dim {} but W_w expects {}",
                        e.dim(),
                        params.w_w.rows()
                    )));
                }
                for (acc, v) in summed.iter_mut().zip(e.values().as_slice()) {
                    *acc += v;
                }
            }
            let w_w_grad = Matrix::from_fn(params.w_w.rows(), params.w_w.cols(), |i, j| {
                c * summed[i] * g_cols.as_slice()[j]
            })?;
            let per_exemplar = matmul(&params.w_w, &column(&g_cols))?.scale(c)?;
            let e_grad = Vector::new(per_exemplar.into_vec())?;
            (w_w_grad, vec![e_grad; inputs.exemplars.len()])
        }
    };

    // attention branch: H = softmax(Q K^T / sqrt(d_k)) V
    let d_attn = matmul(upstream, &t.v.transpose())?;
    let d_v = matmul(&t.attn.transpose(), upstream)?;
    let d_scores = softmax_backward(&t.attn, &d_attn)?;
    let inv_sqrt = 1.0 / (t.q.cols() as f64).sqrt();
    let d_q = matmul(&d_scores, &t.k)?.scale(inv_sqrt)?;
    let d_k = matmul(&d_scores.transpose(), &t.q)?.scale(inv_sqrt)?;

    let w_q = matmul(&p.transpose(), &d_q)?;
    let phonemes = matmul(&d_q, &params.w_q.transpose())?;
    let s_t = s.transpose();
    let w_k = matmul(&s_t, &d_k)?;
    let w_v = matmul(&s_t, &d_v)?;
    let semantic =
        matmul(&d_k, &params.w_k.transpose())?.add(&matmul(&d_v, &params.w_v.transpose())?)?;

    // LoRA branch: S = X (W_base + s A B)
    let d_m = matmul(&x.transpose(), &semantic)?;
    let semantic_features = matmul(&semantic, &adapter.effective_weight().transpose())?;
    let scaling = adapter.scaling();
    let lora_a = matmul(&d_m, &adapter.b.transpose())?.scale(scaling)?;
    let lora_b = matmul(&adapter.a.transpose(), &d_m)?.scale(scaling)?;

    Ok(Gradients {
        phonemes,
        semantic,
        semantic_features,
        exemplars: exemplar_grads,
        w_q,
        w_k,
        w_v,
        w_w: w_w_grad,
        lora_a,
        lora_b,
        lora_base: d_m,
    })
}

fn column(v: &Vector) -> Matrix {
    Matrix::from_raw_unchecked(v.dim(), 1, v.as_slice().to_vec())
}

/// Row-wise softmax Jacobian-vector product: `A * (dA - rowsum(dA * A))`.
fn softmax_backward(attn: &Matrix, d_attn: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(attn.as_slice().len());
    for (a, g) in attn.row_iter().zip(d_attn.row_iter()) {
        let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        out.extend(a.iter().zip(g).map(|(x, y)| x * (y - inner)));
    }
    Matrix::new(attn.rows(), attn.cols(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub inputs: PipelineInputs,
    /// Regression target for `Z`.
    pub target: Matrix,
}

/// Mean squared error over all entries.
pub fn mse_loss(z: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = z.sub(target)?;
    Ok(diff.dot(&diff)? / diff.as_slice().len() as f64)
}

/// One plain gradient-descent step on the batch-mean MSE. Updates
/// `W_q, W_k, W_v, W_w, A, B`; the adapter's base weight is left untouched.
/// Returns the loss before the update.
pub fn train_step_toy(
    params: &mut FusionParams,
    adapter: &mut LoraAdapter,
    batch: &[TrainingExample],
    learning_rate: f64,
    mode: ExemplarMode,
) -> Result<f64> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<[Matrix; 6]> = None;
    for ex in batch {
        let z = pipeline_forward(&ex.inputs, params, adapter, mode)?.z;
        loss += scale * mse_loss(&z, &ex.target)?;
        let n = z.as_slice().len() as f64;
        let upstream = z.sub(&ex.target)?.scale(2.0 * scale / n)?;
        let g = fusion_backward(&ex.inputs, params, adapter, mode, &upstream)?;
        let step = [g.w_q, g.w_k, g.w_v, g.w_w, g.lora_a, g.lora_b];
        acc = Some(match acc {
            None => step,
            Some(prev) => {
                let mut summed = prev;
                for (s, d) in summed.iter_mut().zip(step.iter()) {
                    *s = s.add(d)?;
                }
                summed
            }
        });
    }
    let [g_q, g_k, g_v, g_w, g_a, g_b] = acc.expect("batch is non-empty");
    descend(&mut params.w_q, &g_q, learning_rate);
    descend(&mut params.w_k, &g_k, learning_rate);
    descend(&mut params.w_v, &g_v, learning_rate);
    descend(&mut params.w_w, &g_w, learning_rate);
    descend(&mut adapter.a, &g_a, learning_rate);
    descend(&mut adapter.b, &g_b, learning_rate);
    Ok(loss)
}

fn descend(w: &mut Matrix, g: &Matrix, lr: f64) {
    for (x, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *x -= lr * d;
    }
}
