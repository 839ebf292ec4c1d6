//! Central finite-difference verification of [`fusion_backward`].
//!
//! The numeric side only calls [`pipeline_forward`], so it shares no code
//! with the analytic backward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::{Matrix, Vector};
use crate::prosody::ProsodyEmbedding;

use super::{
    fusion_backward, pipeline_forward, uniform_init, ExemplarMode, FusionDims, FusionParams,
    LoraAdapter, PhonemeEmbedding, PipelineInputs,
};

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Worst relative error per tensor.
    pub per_tensor: BTreeMap<&'static str, f64>,
}

#[derive(Clone)]
struct State {
    inputs: PipelineInputs,
    params: FusionParams,
    adapter: LoraAdapter,
    mode: ExemplarMode,
    upstream: Matrix,
}

impl State {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let dims = FusionDims {
            d_p: dim(1, 8),
            d_t: dim(1, 8),
            d_k: dim(1, 8),
            d_v: dim(1, 8),
            d_w: dim(1, 8),
        };
        let (t_p, t_t, d_in, n_ex) = (dim(1, 6), dim(1, 6), dim(1, 8), dim(0, 3));
        let rank = dim(1, d_in.min(dims.d_t));
        let mode = if dim(0, 1) == 0 {
            ExemplarMode::Sum
        } else {
            ExemplarMode::Mean
        };
        let params = FusionParams::init(dims, rng)?;
        // non-zero B so that every LoRA gradient is exercised
        let adapter = LoraAdapter::new(
            uniform_init(d_in, dims.d_t, rng)?,
            uniform_init(d_in, rank, rng)?,
            uniform_init(rank, dims.d_t, rng)?,
            rng.random_range(0.5..16.0),
        )?;
        let mut unit =
            |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let inputs = PipelineInputs {
            phonemes: PhonemeEmbedding::new(unit(t_p, dims.d_p)?),
            semantic_features: unit(t_t, d_in)?,
            exemplars: (0..n_ex)
                .map(|_| {
                    Ok(ProsodyEmbedding::new(Vector::new(
                        unit(1, dims.d_w)?.into_vec(),
                    )?))
                })
                .collect::<Result<_>>()?,
        };
        let upstream = unit(t_p, dims.d_v)?;
        Ok(Self {
            inputs,
            params,
            adapter,
            mode,
            upstream,
        })
    }

    /// `<upstream, Z>`, whose gradient with respect to `Z` is `upstream`.
    fn loss(&self) -> Result<f64> {
        let z = pipeline_forward(&self.inputs, &self.params, &self.adapter, self.mode)?.z;
        self.upstream.dot(&z)
    }

    fn slot(&mut self, name: &str, exemplar: usize) -> &mut [f64] {
        match name {
            "phonemes" => self.inputs.phonemes.0.as_mut_slice(),
            "semantic_features" => self.inputs.semantic_features.as_mut_slice(),
            "exemplars" => self.inputs.exemplars[exemplar].0.as_mut_slice(),
            "w_q" => self.params.w_q.as_mut_slice(),
            "w_k" => self.params.w_k.as_mut_slice(),
            "w_v" => self.params.w_v.as_mut_slice(),
            "w_w" => self.params.w_w.as_mut_slice(),
            "lora_a" => self.adapter.a.as_mut_slice(),
            "lora_b" => self.adapter.b.as_mut_slice(),
            "lora_base" => self.adapter.base.as_mut_slice(),
            other => unreachable!("unknown tensor {other}"),
        }
    }

    fn numeric_gradient(&self, name: &str, exemplar: usize) -> Result<Vec<f64>> {
        let mut probe = self.clone();
        let n = probe.slot(name, exemplar).len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.slot(name, exemplar)[i];
            probe.slot(name, exemplar)[i] = orig + FD_STEP;
            let plus = probe.loss()?;
            probe.slot(name, exemplar)[i] = orig - FD_STEP;
            let minus = probe.loss()?;
            probe.slot(name, exemplar)[i] = orig;
            grad.push((plus - minus) / (2.0 * FD_STEP));
        }
        Ok(grad)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Runs `trials` random configurations (all dims <= 8, sequence lengths
/// <= 6) and compares every analytic gradient entry with central
/// differences of step [`FD_STEP`].
pub fn grad_check(seed: u64, trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut entries = 0;
    for _ in 0..trials {
        let state = State::random(&mut rng)?;
        let g = fusion_backward(
            &state.inputs,
            &state.params,
            &state.adapter,
            state.mode,
            &state.upstream,
        )?;
        let mut checks: Vec<(&'static str, usize, &[f64])> = vec![
            ("phonemes", 0, g.phonemes.as_slice()),
            ("semantic_features", 0, g.semantic_features.as_slice()),
            ("w_q", 0, g.w_q.as_slice()),
            ("w_k", 0, g.w_k.as_slice()),
            ("w_v", 0, g.w_v.as_slice()),
            ("w_w", 0, g.w_w.as_slice()),
            ("lora_a", 0, g.lora_a.as_slice()),
            ("lora_b", 0, g.lora_b.as_slice()),
            ("lora_base", 0, g.lora_base.as_slice()),
        ];
        checks.extend(
            g.exemplars
                .iter()
                .enumerate()
                .map(|(k, v)| ("exemplars", k, v.as_slice())),
        );
        for (name, k, analytic) in checks {
            let numeric = state.numeric_gradient(name, k)?;
            let worst = analytic
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0, f64::max);
            entries += analytic.len();
            let slot = per_tensor.entry(name).or_insert(0.0);
            *slot = slot.max(worst);
        }
    }
    let max_rel_error = per_tensor.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        trials,
        step: FD_STEP,
        entries_checked: entries,
        max_rel_error,
        per_tensor,
    })
}
