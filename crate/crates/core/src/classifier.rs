//! Per-step two-class scorer with a per-class critic head.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Class, TokenSequence, NUM_CLASSES};
use crate::discriminator::{check_same_length, ScoreSeries, PROB_EPS};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, time_major, Adam, Dense, Dropout, Matrix, ParamSet, RecurrentStack, StackTrace, StepInfo};

pub type ClassDistribution = [f64; NUM_CLASSES];

/// Which class wins an exact tie between the sentence-level scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    NonSpam,
    Spam,
}

impl TieBreak {
    fn class(self) -> Class {
        match self {
            TieBreak::NonSpam => Class::NonSpam,
            TieBreak::Spam => Class::Spam,
        }
    }
}

/// Masked mean of per-step class distributions.
pub fn sentence_distribution(steps: &[ClassDistribution], mask: &[bool]) -> Result<ClassDistribution> {
    if steps.len() != mask.len() {
        return Err(Error::LengthMismatch("class steps and mask".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::NoContent);
    }
    let mut out = [0.0; NUM_CLASSES];
    for (p, _) in steps.iter().zip(mask).filter(|(_, &m)| m) {
        for c in 0..NUM_CLASSES {
            out[c] += p[c];
        }
    }
    Ok(out.map(|x| x / n as f64))
}

pub fn predict(dist: &ClassDistribution, tie: TieBreak) -> Class {
    let (s, n) = (dist[Class::Spam.index()], dist[Class::NonSpam.index()]);
    if s > n {
        Class::Spam
    } else if n > s {
        Class::NonSpam
    } else {
        tie.class()
    }
}

/// Shannon entropy (nats) with the log clamped at `PROB_EPS`.
pub fn entropy(dist: &ClassDistribution) -> f64 {
    -dist.iter().map(|&p| p * p.max(PROB_EPS).ln()).sum::<f64>()
}

/// Per-sentence classifier loss: `−ln p(c)` for real sentences, and
/// `−ln p(c) − β·H(p)` for generated ones.
pub fn sentence_loss(dist: &ClassDistribution, class: Class, beta: Option<f64>) -> f64 {
    let ce = -dist[class.index()].clamp(PROB_EPS, 1.0).ln();
    match beta {
        Some(b) => ce - b * entropy(dist),
        None => ce,
    }
}

/// Gradient of `sentence_loss` w.r.t. the sentence distribution.
fn sentence_loss_grad(dist: &ClassDistribution, class: Class, beta: Option<f64>) -> ClassDistribution {
    let mut g = [0.0; NUM_CLASSES];
    let p = dist[class.index()];
    if p > PROB_EPS {
        g[class.index()] = -1.0 / p;
    }
    if let Some(b) = beta {
        for c in 0..NUM_CLASSES {
            // d(−βH)/dp = β(ln p + 1) above the clamp, β ln ε below it.
            g[c] += if dist[c] > PROB_EPS {
                b * (dist[c].ln() + 1.0)
            } else {
                b * PROB_EPS.ln()
            };
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub stack: RecurrentStack,
    pub head: Dense,
    pub critic: Dense,
}

impl ParamSet for ClassifierParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.body_tensors();
        v.extend(self.critic.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.head.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v
    }
}

/// Per-position class probabilities and critic values for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSteps {
    pub probs: Vec<ClassDistribution>,
    pub critic: Vec<ClassDistribution>,
    pub mask: Vec<bool>,
}

impl ClassSteps {
    pub fn series(&self, class: Class) -> ScoreSeries {
        ScoreSeries {
            q: self.probs.iter().map(|p| p[class.index()]).collect(),
            v: self.critic.iter().map(|p| p[class.index()]).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn sentence(&self) -> Result<ClassDistribution> {
        sentence_distribution(&self.probs, &self.mask)
    }
}

fn softmax_row(logits: ndarray::ArrayView1<'_, f64>) -> ClassDistribution {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        *o = (l - max).exp();
        total += *o;
    }
    out.map(|x| x / total)
}

impl ClassifierParams {
    pub fn new(vocab: usize, embedding_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: RecurrentStack::new(vocab, embedding_dim, 0, hidden, layers, rng),
            head: Dense::new(hidden, NUM_CLASSES, rng),
            critic: Dense::new(hidden, NUM_CLASSES, rng),
        }
    }

    pub fn body_tensors(&self) -> Vec<&Matrix> {
        let mut v = self.stack.tensors();
        v.extend(self.head.tensors());
        v
    }

    pub fn body_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.head.tensors_mut());
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

    pub fn steps(&self, seqs: &[TokenSequence]) -> Result<Vec<ClassSteps>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let trace = self.run::<rand_chacha::ChaCha8Rng>(&refs, None)?;
        let mut out: Vec<ClassSteps> = seqs
            .iter()
            .map(|s| ClassSteps {
                probs: Vec::with_capacity(s.len()),
                critic: Vec::with_capacity(s.len()),
                mask: s.mask().to_vec(),
            })
            .collect();
        for t in 0..trace.len() {
            let logits = self.head.forward(trace.top(t));
            let crit = self.critic.forward(trace.top_prev(t));
            for (b, o) in out.iter_mut().enumerate() {
                o.probs.push(softmax_row(logits.row(b)));
                let mut v = [0.0; NUM_CLASSES];
                for (c, x) in v.iter_mut().enumerate() {
                    *x = sigmoid(crit[[b, c]]);
                }
                o.critic.push(v);
            }
        }
        Ok(out)
    }

    /// `q[t]` = probability of `class` at step `t`, `v[t]` = critic estimate.
    pub fn score_steps(&self, seq: &TokenSequence, class: Class) -> Result<ScoreSeries> {
        Ok(self.steps(std::slice::from_ref(seq))?[0].series(class))
    }

    pub fn distributions(&self, seqs: &[TokenSequence]) -> Result<Vec<ClassDistribution>> {
        self.steps(seqs)?.iter().map(ClassSteps::sentence).collect()
    }

    pub fn classify(&self, seq: &TokenSequence, tie: TieBreak) -> Result<(Class, ClassDistribution)> {
        let dist = self.distributions(std::slice::from_ref(seq))?[0];
        Ok((predict(&dist, tie), dist))
    }

    pub fn classify_batch(&self, seqs: &[TokenSequence], tie: TieBreak) -> Result<Vec<(Class, ClassDistribution)>> {
        Ok(self
            .distributions(seqs)?
            .into_iter()
            .map(|d| (predict(&d, tie), d))
            .collect())
    }

    /// `mean_real(−ln C(c|y)) + mean_fake(−ln C(c|y) − β·H)`; an empty fake
    /// batch drops the second term.
    pub fn loss(&self, real: &[(TokenSequence, Class)], fake: &[(TokenSequence, Class)], beta: f64) -> Result<f64> {
        if real.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mean = |batch: &[(TokenSequence, Class)], b: Option<f64>| -> Result<f64> {
            let seqs: Vec<TokenSequence> = batch.iter().map(|(s, _)| s.clone()).collect();
            let dists = self.distributions(&seqs)?;
            Ok(dists
                .iter()
                .zip(batch)
                .map(|(d, (_, c))| sentence_loss(d, *c, b))
                .sum::<f64>()
                / batch.len() as f64)
        };
        let mut loss = mean(real, None)?;
        if !fake.is_empty() {
            loss += mean(fake, Some(beta))?;
        }
        Ok(loss)
    }

    pub fn loss_and_grad<R: Rng>(
        &self,
        real: &[(TokenSequence, Class)],
        fake: &[(TokenSequence, Class)],
        beta: f64,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, ClassifierParams)> {
        if real.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let items: Vec<(&TokenSequence, Class, Option<f64>, f64)> = real
            .iter()
            .map(|(s, c)| (s, *c, None, 1.0 / real.len() as f64))
            .chain(fake.iter().map(|(s, c)| (s, *c, Some(beta), 1.0 / fake.len() as f64)))
            .collect();
        let seqs: Vec<&TokenSequence> = items.iter().map(|i| i.0).collect();
        let trace = self.run(&seqs, dropout)?;
        let len = trace.len();
        let batch = seqs.len();

        let probs: Vec<Vec<ClassDistribution>> = (0..len)
            .map(|t| {
                let logits = self.head.forward(trace.top(t));
                logits.axis_iter(Axis(0)).map(softmax_row).collect()
            })
            .collect();

        let mut loss = 0.0;
        let mut d_dist = vec![[0.0; NUM_CLASSES]; batch];
        for (b, (s, class, beta, weight)) in items.iter().enumerate() {
            let steps: Vec<ClassDistribution> = (0..len).map(|t| probs[t][b]).collect();
            let dist = sentence_distribution(&steps, s.mask())?;
            loss += weight * sentence_loss(&dist, *class, *beta);
            let n = s.mask().iter().filter(|&&m| m).count() as f64;
            d_dist[b] = sentence_loss_grad(&dist, *class, *beta).map(|g| weight * g / n);
        }

        let mut grad = self.zeros_like();
        let mut d_top = Vec::with_capacity(len);
        for t in 0..len {
            let mut dl = Matrix::zeros((batch, NUM_CLASSES));
            for (b, s) in seqs.iter().enumerate() {
                if !s.mask()[t] {
                    continue;
                }
                let p = probs[t][b];
                let dp = d_dist[b];
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for c in 0..NUM_CLASSES {
                    dl[[b, c]] = p[c] * (dp[c] - dot);
                }
            }
            d_top.push(self.head.backward(trace.top(t), &dl, &mut grad.head));
        }
        self.stack.backward(&trace, d_top, &mut grad.stack);
        Ok((loss, grad))
    }

    /// Mean over generated sentences of `Σ_t (Q_C − V_C)²` for each
    /// sentence's conditioning class, over generated-token positions.
    pub fn critic_loss_and_grad(&self, fake: &[(TokenSequence, Class)]) -> Result<(f64, Dense)> {
        let seqs: Vec<&TokenSequence> = fake.iter().map(|(s, _)| s).collect();
        let trace = self.run::<rand_chacha::ChaCha8Rng>(&seqs, None)?;
        let batch = fake.len();
        let w = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut grad = self.critic.zeros_like();
        for t in 1..trace.len() {
            let logits = self.head.forward(trace.top(t));
            let prev = trace.top_prev(t);
            let crit = self.critic.forward(prev);
            let mut dv = Matrix::zeros((batch, NUM_CLASSES));
            for (b, (s, class)) in fake.iter().enumerate() {
                if !s.mask()[t] {
                    continue;
                }
                let c = class.index();
                let q = softmax_row(logits.row(b))[c];
                let v = sigmoid(crit[[b, c]]);
                loss += w * (q - v).powi(2);
                dv[[b, c]] = w * -2.0 * (q - v) * v * (1.0 - v);
            }
            self.critic.backward(prev, &dv, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn critic_loss(&self, fake: &[(TokenSequence, Class)]) -> Result<f64> {
        Ok(self.critic_loss_and_grad(fake)?.0)
    }

    pub fn update<R: Rng>(
        &mut self,
        real: &[(TokenSequence, Class)],
        fake: &[(TokenSequence, Class)],
        beta: f64,
        optimizer: &mut Adam,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, StepInfo)> {
        let (loss, mut grad) = self.loss_and_grad(real, fake, beta, dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("classifier loss"));
        }
        let info = optimizer.step(self.body_tensors_mut(), grad.body_tensors_mut())?;
        Ok((loss, info))
    }

    pub fn critic_update(&mut self, fake: &[(TokenSequence, Class)], optimizer: &mut Adam) -> Result<(f64, StepInfo)> {
        let (loss, mut grad) = self.critic_loss_and_grad(fake)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        let info = optimizer.step(self.critic.tensors_mut(), grad.tensors_mut())?;
        Ok((loss, info))
    }
}
