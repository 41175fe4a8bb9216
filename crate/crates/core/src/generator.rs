//! Class-conditioned autoregressive generator.
//!
//! The context `z ⊕ onehot(c)` is appended to the token embedding at every
//! input step. `<start>` and `<pad>` are never valid outputs, so their logits
//! are masked out of the softmax both when sampling and when teacher forcing.

use ndarray::s;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Class, TokenSequence, END, NUM_CLASSES, PAD, START};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, time_major, Adam, Dense, Dropout, Matrix, ParamSet, RecurrentStack, StepInfo};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    probs: [f64; NUM_CLASSES],
}

impl ClassPrior {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class prior {probs:?} is not a distribution"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    pub fn only(class: Class) -> Self {
        let mut probs = [0.0; NUM_CLASSES];
        probs[class.index()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> [f64; NUM_CLASSES] {
        self.probs
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Class {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in Class::ALL {
            acc += self.probs[c.index()];
            if u < acc {
                return c;
            }
        }
        // Only reachable through rounding; fall back to the last class with mass.
        Class::ALL
            .into_iter()
            .rev()
            .find(|c| self.probs[c.index()] > 0.0)
            .expect("prior has mass")
    }
}

/// Conditioning for one sentence, constant over all its steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub z: Vec<f64>,
    pub class: Class,
}

impl Context {
    /// Context for a real sentence: no generative noise.
    pub fn real(class: Class, z_dim: usize) -> Self {
        Self {
            z: vec![0.0; z_dim],
            class,
        }
    }

    pub fn onehot(&self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.class.index()] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.z.len() + NUM_CLASSES
    }
}

pub fn sample_context(prior: &ClassPrior, z_dim: usize, rng: &mut impl Rng) -> Context {
    let z = (0..z_dim).map(|_| rng.sample(StandardNormal)).collect();
    Context {
        z,
        class: prior.sample(rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub sequences: Vec<TokenSequence>,
    pub contexts: Vec<Context>,
    /// Log-probability (temperature 1) of each sampled token after `<start>`.
    pub step_logprobs: Vec<Vec<f64>>,
}

impl GeneratedBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labeled(&self) -> Vec<(TokenSequence, Class)> {
        self.sequences
            .iter()
            .cloned()
            .zip(self.contexts.iter().map(|c| c.class))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub stack: RecurrentStack,
    pub output: Dense,
    pub z_dim: usize,
}

impl ParamSet for GeneratorParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.stack.tensors();
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}

fn check_batch(seqs: &[&TokenSequence], vocab: usize) -> Result<usize> {
    let first = seqs.first().ok_or(Error::EmptyBatch)?;
    let len = first.len();
    for s in seqs {
        if s.len() != len {
            return Err(Error::LengthMismatch(format!(
                "sequence lengths {} and {} in one batch",
                len,
                s.len()
            )));
        }
        s.check_vocab(vocab)?;
    }
    if len < 2 {
        return Err(Error::InvalidArgument("sequences need at least two positions".into()));
    }
    Ok(len)
}

impl GeneratorParams {
    pub fn new(
        vocab: usize,
        embedding_dim: usize,
        z_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            stack: RecurrentStack::new(vocab, embedding_dim, z_dim + NUM_CLASSES, hidden, layers, rng),
            output: Dense::new(hidden, vocab, rng),
            z_dim,
        }
    }

    pub fn vocab(&self) -> usize {
        self.stack.vocab()
    }

    fn context_matrix(&self, contexts: &[&Context]) -> Result<Matrix> {
        let dim = self.z_dim + NUM_CLASSES;
        let mut m = Matrix::zeros((contexts.len(), dim));
        for (b, c) in contexts.iter().enumerate() {
            if c.z.len() != self.z_dim {
                return Err(Error::LengthMismatch(format!(
                    "context z has {} dims, generator expects {}",
                    c.z.len(),
                    self.z_dim
                )));
            }
            if c.z.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("context"));
            }
            for (j, &x) in c.z.iter().chain(c.onehot().iter()).enumerate() {
                m[[b, j]] = x;
            }
        }
        Ok(m)
    }

    /// Output logits with `<start>` and `<pad>` removed from the support.
    pub fn logits(&self, top: &Matrix) -> Matrix {
        let mut logits = self.output.forward(top);
        logits.column_mut(START as usize).fill(f64::NEG_INFINITY);
        logits.column_mut(PAD as usize).fill(f64::NEG_INFINITY);
        logits
    }

    /// Samples one sentence per context. Generation stops at `<end>` or
    /// after `max_len` positions; the remainder is padded.
    pub fn generate(
        &self,
        contexts: &[Context],
        max_len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<GeneratedBatch> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        let batch = contexts.len();
        let ctx = self.context_matrix(&contexts.iter().collect::<Vec<_>>())?;
        let mut state = self.stack.initial_state(batch);
        let mut ids: Vec<Vec<u32>> = vec![vec![START]; batch];
        let mut logprobs: Vec<Vec<f64>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        let mut current = vec![START; batch];
        let mut probs = vec![0.0; self.vocab()];

        for _ in 1..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let top = self.stack.step(&current, Some(&ctx), &mut state);
            let logits = self.logits(&top);
            let lp = log_softmax_rows(&logits);
            for b in 0..batch {
                if done[b] {
                    current[b] = PAD;
                    continue;
                }
                let row = logits.row(b);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (p, &l) in probs.iter_mut().zip(row.iter()) {
                    *p = ((l - max) / temperature).exp();
                    total += *p;
                }
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut token = None;
                for (v, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        token = Some(v);
                        if u < acc {
                            break;
                        }
                    }
                }
                let token = token.expect("at least one token has mass") as u32;
                logprobs[b].push(lp[[b, token as usize]]);
                ids[b].push(token);
                current[b] = token;
                if token == END {
                    done[b] = true;
                }
            }
        }
        let sequences = ids
            .into_iter()
            .map(|mut v| {
                v.resize(max_len, PAD);
                TokenSequence::new(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratedBatch {
            sequences,
            contexts: contexts.to_vec(),
            step_logprobs: logprobs,
        })
    }

    /// Full next-token log-distributions under teacher forcing; entry `t`
    /// predicts position `t + 1`.
    pub fn step_log_distributions(&self, seq: &TokenSequence, context: &Context) -> Result<Vec<Vec<f64>>> {
        check_batch(&[seq], self.vocab())?;
        let ctx = self.context_matrix(&[context])?;
        let n = seq.len() - 1;
        let trace = self
            .stack
            .forward::<rand_chacha::ChaCha8Rng>(time_major(&[&seq.ids()[..n]], n), Some(&ctx), None);
        Ok((0..n)
            .map(|t| log_softmax_rows(&self.logits(trace.top(t))).row(0).to_vec())
            .collect())
    }

    /// Teacher-forced log-probabilities of each content token after
    /// `<start>`; one entry per target position `1..T`, 0 on padding.
    pub fn sequence_logprobs(&self, seqs: &[TokenSequence], contexts: &[Context]) -> Result<Vec<Vec<f64>>> {
        let weights: Vec<Vec<f64>> = seqs.iter().map(|s| vec![0.0; s.len().saturating_sub(1)]).collect();
        let (_, lps, _) = self.weighted_nll::<rand_chacha::ChaCha8Rng>(seqs, contexts, &weights, None, false)?;
        Ok(lps)
    }

    /// Computes `Σ_b Σ_t w[b][t] · (−log G(y_{t+1} | y_{≤t}, context))` over
    /// content targets and, when `with_grad`, its gradient.
    ///
    /// `weights[b][t]` multiplies the target at position `t + 1`.
    #[allow(clippy::type_complexity)]
    pub fn weighted_nll<R: Rng>(
        &self,
        seqs: &[TokenSequence],
        contexts: &[Context],
        weights: &[Vec<f64>],
        dropout: Option<Dropout<'_, R>>,
        with_grad: bool,
    ) -> Result<(f64, Vec<Vec<f64>>, Option<GeneratorParams>)> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let len = check_batch(&refs, self.vocab())?;
        if contexts.len() != seqs.len() || weights.len() != seqs.len() {
            return Err(Error::LengthMismatch("sequences, contexts and weights differ in count".into()));
        }
        if weights.iter().any(|w| w.len() != len - 1) {
            return Err(Error::LengthMismatch(format!("weights must have {} entries per sequence", len - 1)));
        }
        let batch = seqs.len();
        let n = len - 1;
        let ctx = self.context_matrix(&contexts.iter().collect::<Vec<_>>())?;
        let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s.ids()[..n]).collect();
        let trace = self.stack.forward(time_major(&inputs, n), Some(&ctx), dropout);

        let mut total = 0.0;
        let mut lps = vec![vec![0.0; n]; batch];
        let mut grad = with_grad.then(|| self.zeros_like());
        let mut d_top = Vec::with_capacity(if with_grad { n } else { 0 });
        for t in 0..n {
            let top = trace.top(t);
            let logits = self.logits(top);
            let lp = log_softmax_rows(&logits);
            let mut dlogits = with_grad.then(|| Matrix::zeros(logits.raw_dim()));
            for b in 0..batch {
                if !seqs[b].mask()[t + 1] {
                    continue;
                }
                let target = seqs[b].ids()[t + 1] as usize;
                let l = lp[[b, target]];
                lps[b][t] = l;
                let w = weights[b][t];
                if w == 0.0 {
                    continue;
                }
                total -= w * l;
                if let Some(d) = dlogits.as_mut() {
                    let mut row = d.row_mut(b);
                    row.assign(&lp.row(b).mapv(|x| w * x.exp()));
                    row[target] -= w;
                }
            }
            if let (Some(g), Some(d)) = (grad.as_mut(), dlogits) {
                d_top.push(self.output.backward(top, &d, &mut g.output));
            }
        }
        if let Some(g) = grad.as_mut() {
            self.stack.backward(&trace, d_top, &mut g.stack);
        }
        Ok((total, lps, grad))
    }

    /// Mean over the batch of the summed next-token cross-entropy, with
    /// `z = 0` for every real sentence.
    pub fn mle_loss(&self, batch: &[(TokenSequence, Class)]) -> Result<f64> {
        let (seqs, ctxs, weights) = self.mle_inputs(batch)?;
        let (loss, _, _) = self.weighted_nll::<rand_chacha::ChaCha8Rng>(&seqs, &ctxs, &weights, None, false)?;
        Ok(loss)
    }

    pub fn mle_loss_and_grad<R: Rng>(
        &self,
        batch: &[(TokenSequence, Class)],
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, GeneratorParams)> {
        let (seqs, ctxs, weights) = self.mle_inputs(batch)?;
        let (loss, _, grad) = self.weighted_nll(&seqs, &ctxs, &weights, dropout, true)?;
        Ok((loss, grad.expect("requested")))
    }

    #[allow(clippy::type_complexity)]
    fn mle_inputs(&self, batch: &[(TokenSequence, Class)]) -> Result<(Vec<TokenSequence>, Vec<Context>, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let w = 1.0 / batch.len() as f64;
        let seqs: Vec<TokenSequence> = batch.iter().map(|(s, _)| s.clone()).collect();
        let ctxs = batch.iter().map(|(_, c)| Context::real(*c, self.z_dim)).collect();
        let weights = seqs.iter().map(|s| vec![w; s.len().saturating_sub(1)]).collect();
        Ok((seqs, ctxs, weights))
    }

    /// One Adam step on the MLE loss. A non-finite loss or gradient leaves the
    /// parameters unchanged.
    pub fn mle_update<R: Rng>(
        &mut self,
        batch: &[(TokenSequence, Class)],
        optimizer: &mut Adam,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<(f64, StepInfo)> {
        let (loss, mut grad) = self.mle_loss_and_grad(batch, dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let info = optimizer.step(self.tensors_mut(), grad.tensors_mut())?;
        Ok((loss, info))
    }

    /// Total-variation distance between the first-step distributions for
    /// the two classes with `z = 0`.
    pub fn class_divergence(&self) -> f64 {
        let mut state = self.stack.initial_state(2);
        let ctxs = [
            Context::real(Class::NonSpam, self.z_dim),
            Context::real(Class::Spam, self.z_dim),
        ];
        let ctx = self.context_matrix(&ctxs.iter().collect::<Vec<_>>()).expect("valid contexts");
        let top = self.stack.step(&[START, START], Some(&ctx), &mut state);
        let p = log_softmax_rows(&self.logits(&top)).mapv(f64::exp);
        0.5 * (&p.slice(s![0, ..]) - &p.slice(s![1, ..])).mapv(f64::abs).sum()
    }
}

/// Greedy decode: argmax at each step. The zero-temperature limit of
/// `generate`.
pub fn greedy_decode(params: &GeneratorParams, context: &Context, max_len: usize) -> Result<TokenSequence> {
    let ctx = params.context_matrix(&[context])?;
    let mut state = params.stack.initial_state(1);
    let mut ids = vec![START];
    let mut current = START;
    while ids.len() < max_len {
        let top = params.stack.step(&[current], Some(&ctx), &mut state);
        let logits = params.logits(&top);
        let (best, _) = logits
            .row(0)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
        current = best as u32;
        ids.push(current);
        if current == END {
            break;
        }
    }
    ids.resize(max_len, PAD);
    TokenSequence::new(ids)
}
