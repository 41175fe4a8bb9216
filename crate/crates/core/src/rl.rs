//! Reward blending, advantage estimation and the generator's policy-gradient
//! step.

use serde::{Deserialize, Serialize};

use crate::discriminator::ScoreSeries;
use crate::error::{Error, Result};
use crate::generator::{GeneratedBatch, GeneratorParams};
use crate::nn::{Adam, ParamSet, StepInfo};

/// Harmonic blend `2ab / (a + b)`, defined as 0 when `a + b = 0`.
pub fn blend(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s == 0.0 {
        0.0
    } else if a == b {
        a
    } else {
        2.0 * a * b / s
    }
}

/// Sentence reward from the discriminator's and classifier's sentence
/// scores, delivered at the final step.
pub fn sentence_reward(d_score: f64, c_score: f64) -> f64 {
    blend(d_score, c_score)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTrace {
    pub blended_q: Vec<f64>,
    pub blended_v: Vec<f64>,
    pub alpha: Vec<f64>,
    pub advantage: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Per-step advantages `α_t · (Q_t − V_t)` with `α_t = horizon − t + offset`
/// for `t = 1..=len`, where `Q`/`V` blend the discriminator and classifier
/// series. Masked positions carry zero advantage.
pub fn advantages(
    disc: &ScoreSeries,
    cls: &ScoreSeries,
    horizon: usize,
    alpha_offset: f64,
) -> Result<AdvantageTrace> {
    let n = disc.len();
    let lens = [disc.v.len(), disc.mask.len(), cls.q.len(), cls.v.len(), cls.mask.len()];
    if lens.iter().any(|&l| l != n) || n != horizon {
        return Err(Error::LengthMismatch(format!(
            "score series of length {n} against horizon {horizon}"
        )));
    }
    if disc.mask != cls.mask {
        return Err(Error::LengthMismatch("discriminator and classifier masks differ".into()));
    }
    let mut trace = AdvantageTrace {
        blended_q: Vec::with_capacity(n),
        blended_v: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        advantage: Vec::with_capacity(n),
        mask: disc.mask.clone(),
    };
    for i in 0..n {
        let q = blend(disc.q[i], cls.q[i]);
        let v = blend(disc.v[i], cls.v[i]);
        let alpha = (horizon - (i + 1)) as f64 + alpha_offset;
        trace.blended_q.push(q);
        trace.blended_v.push(v);
        trace.alpha.push(alpha);
        trace.advantage.push(if disc.mask[i] { alpha * (q - v) } else { 0.0 });
    }
    Ok(trace)
}

/// Standardizes advantages over all content positions of a batch.
pub fn whiten(traces: &mut [AdvantageTrace]) {
    let vals: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.advantage.iter().zip(&t.mask).filter(|(_, &m)| m).map(|(a, _)| *a))
        .collect();
    if vals.len() < 2 {
        return;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    for t in traces {
        for (a, &m) in t.advantage.iter_mut().zip(&t.mask) {
            if m {
                *a = (*a - mean) / (std + 1e-8);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStepStats {
    /// `Σ_b Σ_t A_bt · log G(y_bt)` averaged over the batch.
    pub surrogate: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
}

/// One ascent step on `mean_b Σ_t A_bt · log G(y_bt | ·)`. Log-probabilities
/// are recomputed by teacher forcing the sampled tokens (no dropout), so the
/// gradient is exact for the sampling policy. `traces[b]` is aligned with
/// positions `1..T` of `generated.sequences[b]`.
pub fn policy_gradient_update(
    gen: &mut GeneratorParams,
    generated: &GeneratedBatch,
    traces: &[AdvantageTrace],
    optimizer: &mut Adam,
) -> Result<PolicyStepStats> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if traces.len() != generated.len() {
        return Err(Error::LengthMismatch("one advantage trace per generated sentence".into()));
    }
    let scale = 1.0 / generated.len() as f64;
    // Minimizing Σ w·(−log G) with w = A/B is ascent on the surrogate.
    let weights: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.advantage.iter().map(|a| a * scale).collect())
        .collect();
    let (neg_surrogate, _, grad) = gen.weighted_nll::<rand_chacha::ChaCha8Rng>(
        &generated.sequences,
        &generated.contexts,
        &weights,
        None,
        true,
    )?;
    let mut grad = grad.expect("requested");
    if !neg_surrogate.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    let StepInfo { grad_norm, .. } = optimizer.step(gen.tensors_mut(), grad.tensors_mut())?;
    let count = traces.iter().map(|t| t.mask.iter().filter(|&&m| m).count()).sum::<usize>().max(1);
    let abs_sum: f64 = traces.iter().flat_map(|t| t.advantage.iter()).map(|a| a.abs()).sum();
    Ok(PolicyStepStats {
        surrogate: -neg_surrogate,
        mean_abs_advantage: abs_sum / count as f64,
        grad_norm,
    })
}
