//! Per-step real/fake discriminator with a critic head.
//!
//! Position `t` of a sequence is scored from the top recurrent state after
//! consuming `y_{0..=t}`; the critic value at `t` reads the state after
//! `y_{0..t}` (the zero initial state for `t = 0`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, time_major, Adam, Dense, Dropout, Matrix, ParamSet, RecurrentStack, StackTrace, StepInfo};

/// Log-safety clamp for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Per-position scores `q` and critic baselines `v` with the content mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Drops position 0 (`<start>`, never an action), leaving one entry per
    /// generated token slot.
    pub fn actions(&self) -> ScoreSeries {
        ScoreSeries {
            q: self.q[1..].to_vec(),
            v: self.v[1..].to_vec(),
            mask: self.mask[1..].to_vec(),
        }
    }
}

/// Mean of `q` over content positions, or over every position when
/// `strict_all_positions` is set.
pub fn sentence_score(q: &[f64], mask: &[bool], strict_all_positions: bool) -> Result<f64> {
    if q.len() != mask.len() {
        return Err(Error::LengthMismatch("scores and mask".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::NoContent);
    }
    if strict_all_positions {
        return Ok(q.iter().sum::<f64>() / q.len() as f64);
    }
    Ok(q.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / n as f64)
}

pub fn disc_sentence_score(series: &ScoreSeries) -> Result<f64> {
    sentence_score(&series.q, &series.mask, false)
}

/// `Σ_t (q_t − v_t)²` over masked positions.
pub fn critic_sse(q: &[f64], v: &[f64], mask: &[bool]) -> Result<f64> {
    if q.len() != v.len() || q.len() != mask.len() {
        return Err(Error::LengthMismatch("critic series".into()));
    }
    Ok(q.iter()
        .zip(v)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((q, v), _)| (q - v).powi(2))
        .sum())
}

/// GAN loss from sentence scores: `mean(−ln D(real)) + mean(−ln(1 − D(fake)))`.
pub fn gan_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let real = real_scores.iter().map(|&d| -clamp(d).ln()).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|&d| -(1.0 - clamp(d)).ln()).sum::<f64>() / fake_scores.len() as f64;
    Ok(real + fake)
}

pub(crate) fn check_same_length(seqs: &[&TokenSequence], vocab: usize) -> Result<usize> {
    let len = seqs.first().ok_or(Error::EmptyBatch)?.len();
    for s in seqs {
        if s.len() != len {
            return Err(Error::LengthMismatch(format!("sequence lengths {len} and {}", s.len())));
        }
        s.check_vocab(vocab)?;
    }
    Ok(len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub stack: RecurrentStack,
    pub score: Dense,
    pub critic: Dense,
}

impl ParamSet for DiscriminatorParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.body_tensors();
        v.extend(self.critic.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.score.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v
    }
}

impl DiscriminatorParams {
    pub fn new(vocab: usize, embedding_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: RecurrentStack::new(vocab, embedding_dim, 0, hidden, layers, rng),
            score: Dense::new(hidden, 1, rng),
            critic: Dense::new(hidden, 1, rng),
        }
    }

    /// Trunk and score head (everything except the critic).
    pub fn body_tensors(&self) -> Vec<&Matrix> {
        let mut v = self.stack.tensors();
        v.extend(self.score.tensors());
        v
    }

    pub fn body_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.score.tensors_mut());
        v
    }

    pub fn body_fingerprint(&self) -> String {
        crate::nn::fingerprint(self.body_tensors())
    }

    pub fn critic_fingerprint(&self) -> String {
        self.critic.fingerprint()
    }

    fn run<R: Rng>(&self, seqs: &[&TokenSequence], dropout: Option<Dropout<'_, R>>) -> Result<StackTrace> {
        let len = check_same_length(seqs, self.stack.vocab())?;
        let rows: Vec<&[u32]> = seqs.iter().map(|s| s.ids()).collect();
        Ok(self.stack.forward(time_major(&rows, len), None, dropout))
    }

    fn series_from_trace(&self, seqs: &[&TokenSequence], trace: &StackTrace) -> Vec<ScoreSeries> {
        let mut out: Vec<ScoreSeries> = seqs
            .iter()
            .map(|s| ScoreSeries {
                q: Vec::with_capacity(s.len()),
                v: Vec::with_capacity(s.len()),
                mask: s.mask().to_vec(),
            })
            .collect();
        for t in 0..trace.len() {
            let q = self.score.forward(trace.top(t));
            let v = self.critic.forward(trace.top_prev(t));
            for (b, s) in out.iter_mut().enumerate() {
                s.q.push(sigmoid(q[[b, 0]]));
                s.v.push(sigmoid(v[[b, 0]]));
            }
        }
        out
    }

    pub fn score_steps(&self, seqs: &[TokenSequence]) -> Result<Vec<ScoreSeries>> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let trace = self.run::<rand_chacha::ChaCha8Rng>(&refs, None)?;
        Ok(self.series_from_trace(&refs, &trace))
    }

    pub fn sentence_scores(&self, seqs: &[TokenSequence], strict_all_positions: bool) -> Result<Vec<f64>> {
        self.score_steps(seqs)?
            .iter()
            .map(|s| sentence_score(&s.q, &s.mask, strict_all_positions))
            .collect()
    }

    pub fn loss(&self, real: &[TokenSequence], fake: &[TokenSequence], strict_all_positions: bool) -> Result<f64> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::EmptyBatch);
        }
        gan_loss(
            &self.sentence_scores(real, strict_all_positions)?,
            &self.sentence_scores(fake, strict_all_positions)?,
        )
    }

    /// GAN loss and its gradient w.r.t. trunk and score head. The critic
    /// entries of the returned gradient are zero.
    pub fn loss_and_grad<R: Rng>(
        &self,
        real: &[TokenSequence],
        fake: &[TokenSequence],
        strict_all_positions: bool,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, DiscriminatorParams)> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let seqs: Vec<&TokenSequence> = real.iter().chain(fake).collect();
        let trace = self.run(&seqs, dropout)?;
        let len = trace.len();
        let batch = seqs.len();

        let logits: Vec<Matrix> = (0..len).map(|t| self.score.forward(trace.top(t))).collect();
        let mut loss = 0.0;
        // dL/dD per sequence, already divided by the number of averaged positions.
        let mut d_mean = vec![0.0; batch];
        for (b, s) in seqs.iter().enumerate() {
            let q: Vec<f64> = logits.iter().map(|l| sigmoid(l[[b, 0]])).collect();
            let d = sentence_score(&q, s.mask(), strict_all_positions)?;
            let is_real = b < real.len();
            let weight = 1.0 / if is_real { real.len() } else { fake.len() } as f64;
            let inside = d > PROB_EPS && d < 1.0 - PROB_EPS;
            let dc = d.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let n = if strict_all_positions {
                len
            } else {
                s.mask().iter().filter(|&&m| m).count()
            };
            if is_real {
                loss -= weight * dc.ln();
                if inside {
                    d_mean[b] = -weight / dc / n as f64;
                }
            } else {
                loss -= weight * (1.0 - dc).ln();
                if inside {
                    d_mean[b] = weight / (1.0 - dc) / n as f64;
                }
            }
        }

        let mut grad = self.zeros_like();
        let mut d_top = Vec::with_capacity(len);
        for (t, l) in logits.iter().enumerate() {
            let mut dl = Matrix::zeros((batch, 1));
            for (b, s) in seqs.iter().enumerate() {
                if strict_all_positions || s.mask()[t] {
                    let q = sigmoid(l[[b, 0]]);
                    dl[[b, 0]] = d_mean[b] * q * (1.0 - q);
                }
            }
            d_top.push(self.score.backward(trace.top(t), &dl, &mut grad.score));
        }
        self.stack.backward(&trace, d_top, &mut grad.stack);
        Ok((loss, grad))
    }

    /// Mean over sequences of `Σ_t (Q_t − V_t)²` over generated-token
    /// positions. `Q` is a fixed target; only the critic head gets gradient.
    pub fn critic_loss_and_grad(&self, fake: &[TokenSequence]) -> Result<(f64, Dense)> {
        let refs: Vec<&TokenSequence> = fake.iter().collect();
        let trace = self.run::<rand_chacha::ChaCha8Rng>(&refs, None)?;
        let batch = fake.len();
        let w = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut grad = self.critic.zeros_like();
        for t in 1..trace.len() {
            let q = self.score.forward(trace.top(t));
            let prev = trace.top_prev(t);
            let v = self.critic.forward(prev);
            let mut dv = Matrix::zeros((batch, 1));
            for (b, s) in fake.iter().enumerate() {
                if !s.mask()[t] {
                    continue;
                }
                let (qb, vb) = (sigmoid(q[[b, 0]]), sigmoid(v[[b, 0]]));
                loss += w * (qb - vb).powi(2);
                dv[[b, 0]] = w * -2.0 * (qb - vb) * vb * (1.0 - vb);
            }
            self.critic.backward(prev, &dv, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn critic_loss(&self, fake: &[TokenSequence]) -> Result<f64> {
        Ok(self.critic_loss_and_grad(fake)?.0)
    }

    pub fn update<R: Rng>(
        &mut self,
        real: &[TokenSequence],
        fake: &[TokenSequence],
        strict_all_positions: bool,
        optimizer: &mut Adam,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, StepInfo)> {
        let (loss, mut grad) = self.loss_and_grad(real, fake, strict_all_positions, dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss"));
        }
        let info = optimizer.step(self.body_tensors_mut(), grad.body_tensors_mut())?;
        Ok((loss, info))
    }

    pub fn critic_update(&mut self, fake: &[TokenSequence], optimizer: &mut Adam) -> Result<(f64, StepInfo)> {
        let (loss, mut grad) = self.critic_loss_and_grad(fake)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        let info = optimizer.step(self.critic.tensors_mut(), grad.tensors_mut())?;
        Ok((loss, info))
    }
}
