//! Pretraining and the adversarial training loop, checkpoints and the
//! metrics stream.
//!
//! Every update phase touches exactly one block of parameters: the
//! generator, the discriminator (body or critic head) or the classifier
//! (body or critic head). With `verify_blocks` on, the frozen blocks are
//! fingerprinted around each phase and any drift aborts the run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::classifier::ClassifierParams;
use crate::config::TrainConfig;
use crate::corpus::{Class, DatasetBundle, TokenSequence, Vocabulary};
use crate::discriminator::{disc_sentence_score, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{sample_context, ClassPrior, Context, GeneratedBatch, GeneratorParams};
use crate::nn::{Adam, Dropout, ParamSet};
use crate::rl::{advantages, blend, policy_gradient_update, whiten, AdvantageTrace};

pub const CHECKPOINT_SCHEMA: &str = "reviewgan-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
    pub disc_critic: Adam,
    pub classifier: Adam,
    pub cls_critic: Adam,
}

impl Optimizers {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            generator: Adam::new(config.optim.generator()),
            discriminator: Adam::new(config.optim.discriminator()),
            disc_critic: Adam::new(config.optim.discriminator()),
            classifier: Adam::new(config.optim.classifier()),
            cls_critic: Adam::new(config.optim.classifier()),
        }
    }
}

/// Completed epochs per stage plus the skip bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub pretrain_g: usize,
    pub pretrain_d: usize,
    pub pretrain_c: usize,
    pub adversarial: usize,
    pub consecutive_skips: usize,
    pub skipped_updates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainG,
    PretrainD,
    PretrainC,
    GAdv,
    GMle,
    D,
    C,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainG => "pretrain-g",
            Phase::PretrainD => "pretrain-d",
            Phase::PretrainC => "pretrain-c",
            Phase::GAdv => "g-adv",
            Phase::GMle => "g-mle",
            Phase::D => "d",
            Phase::C => "c",
        }
    }

    fn blocks(self) -> &'static [Block] {
        match self {
            Phase::PretrainG | Phase::GAdv | Phase::GMle => &[Block::Generator],
            Phase::PretrainD | Phase::D => &[Block::Discriminator, Block::DiscCritic],
            Phase::PretrainC | Phase::C => &[Block::Classifier, Block::ClsCritic],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Generator,
    Discriminator,
    DiscCritic,
    Classifier,
    ClsCritic,
}

/// One line of the metrics stream: averages over an epoch of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    /// 1-based epoch within the phase's stage (the outer epoch for
    /// adversarial phases).
    pub epoch: usize,
    pub batches: usize,
    pub skipped: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Default)]
struct Accumulator {
    sums: BTreeMap<String, (f64, usize)>,
    batches: usize,
    skipped: usize,
}

impl Accumulator {
    fn add(&mut self, name: &str, value: f64) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    fn finish(self, phase: Phase, epoch: usize) -> MetricRecord {
        MetricRecord {
            phase,
            epoch,
            batches: self.batches,
            skipped: self.skipped,
            values: self
                .sums
                .into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect(),
        }
    }
}

/// All mutable training state. Serializing it captures a run exactly,
/// including the random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub classifier: ClassifierParams,
    pub optimizers: Optimizers,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    pub metrics: Vec<MetricRecord>,
}

impl RunState {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = GeneratorParams::new(vocab_size, m.embedding_dim, m.z_dim, m.gen_hidden, m.gen_layers, &mut rng);
        let discriminator = DiscriminatorParams::new(vocab_size, m.embedding_dim, m.disc_hidden, m.disc_layers, &mut rng);
        let classifier = ClassifierParams::new(vocab_size, m.embedding_dim, m.cls_hidden, m.cls_layers, &mut rng);
        Ok(Self {
            generator,
            discriminator,
            classifier,
            optimizers: Optimizers::new(config),
            rng,
            progress: Progress::default(),
            metrics: Vec::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.generator.vocab()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Fingerprints {
    generator: String,
    discriminator: String,
    disc_critic: String,
    classifier: String,
    cls_critic: String,
}

impl Fingerprints {
    fn capture(state: &RunState) -> Self {
        Self {
            generator: state.generator.fingerprint(),
            discriminator: state.discriminator.body_fingerprint(),
            disc_critic: state.discriminator.critic_fingerprint(),
            classifier: state.classifier.body_fingerprint(),
            cls_critic: state.classifier.critic_fingerprint(),
        }
    }

    fn check(&self, after: &Fingerprints, phase: Phase) -> Result<()> {
        let allowed = phase.blocks();
        let pairs = [
            (Block::Generator, &self.generator, &after.generator, "generator"),
            (Block::Discriminator, &self.discriminator, &after.discriminator, "discriminator"),
            (Block::DiscCritic, &self.disc_critic, &after.disc_critic, "discriminator critic"),
            (Block::Classifier, &self.classifier, &after.classifier, "classifier"),
            (Block::ClsCritic, &self.cls_critic, &after.cls_critic, "classifier critic"),
        ];
        for (block, before, after, name) in pairs {
            if !allowed.contains(&block) && before != after {
                return Err(Error::BlockViolation(format!(
                    "{name} changed during phase {}",
                    phase.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Training sentences in the form the phases consume.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub labeled: Vec<(TokenSequence, Class)>,
    pub unlabeled: Vec<TokenSequence>,
    pub seq_len: usize,
}

impl TrainingData {
    pub fn new(labeled: Vec<(TokenSequence, Class)>, unlabeled: Vec<TokenSequence>) -> Result<Self> {
        let seq_len = labeled
            .first()
            .map(|(s, _)| s.len())
            .or_else(|| unlabeled.first().map(TokenSequence::len))
            .ok_or(Error::EmptyCorpus)?;
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("no labeled training sentences".into()));
        }
        let all = labeled.iter().map(|(s, _)| s).chain(&unlabeled);
        for s in all {
            if s.len() != seq_len {
                return Err(Error::LengthMismatch(format!(
                    "training sentences of length {} and {seq_len}",
                    s.len()
                )));
            }
        }
        Ok(Self {
            labeled,
            unlabeled,
            seq_len,
        })
    }

    pub fn from_bundle(bundle: &DatasetBundle) -> Result<Self> {
        let unlabeled = bundle
            .unlabeled
            .iter()
            .map(|e| e.sequence.clone())
            .collect();
        Self::new(bundle.labeled_pairs(), unlabeled)
    }

    fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for s in self.labeled.iter().map(|(s, _)| s).chain(&self.unlabeled) {
            s.check_vocab(vocab_size)?;
        }
        Ok(())
    }
}

/// Mean blended Q and V over the content positions of a batch.
fn masked_means(traces: &[AdvantageTrace]) -> (f64, f64) {
    let (mut q, mut v, mut n) = (0.0, 0.0, 0usize);
    for t in traces {
        for i in (0..t.mask.len()).filter(|&i| t.mask[i]) {
            q += t.blended_q[i];
            v += t.blended_v[i];
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (q / n, v / n)
}

/// Optional side channels of a run.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Receives one JSON line per [`MetricRecord`].
    pub metrics: Option<&'a mut dyn Write>,
    /// Periodic checkpoints (`schedule.checkpoint_every`) go here.
    pub checkpoint: Option<(&'a Path, Option<&'a Vocabulary>)>,
}

struct Ctx<'c> {
    config: &'c TrainConfig,
    data: &'c TrainingData,
    prior: ClassPrior,
    /// Pretraining aborts on the first non-finite loss.
    abort_on_non_finite: bool,
}

fn dropout(rate: f64, rng: &mut ChaCha8Rng) -> Option<Dropout<'_, ChaCha8Rng>> {
    (rate > 0.0).then_some(Dropout { rate, rng })
}

fn batches<T>(items: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    items.chunks(size)
}

impl Ctx<'_> {
    /// Records a skipped update; consecutive skips beyond the limit abort.
    fn guard<T>(&self, state: &mut RunState, acc: &mut Accumulator, result: Result<T>) -> Result<Option<T>> {
        match result {
            Ok(v) => {
                state.progress.consecutive_skips = 0;
                acc.batches += 1;
                Ok(Some(v))
            }
            Err(Error::NonFinite(what)) if !self.abort_on_non_finite => {
                state.progress.consecutive_skips += 1;
                state.progress.skipped_updates += 1;
                acc.skipped += 1;
                warn!(what, skips = state.progress.consecutive_skips, "skipping non-finite update");
                if state.progress.consecutive_skips >= self.config.schedule.max_consecutive_skips {
                    return Err(Error::Diverged(format!(
                        "{} consecutive non-finite updates (last: {what})",
                        state.progress.consecutive_skips
                    )));
                }
                Ok(None)
            }
            Err(Error::NonFinite(what)) => Err(Error::Diverged(format!("non-finite {what} during pretraining"))),
            Err(e) => Err(e),
        }
    }

    fn contexts(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Context> {
        (0..n)
            .map(|_| sample_context(&self.prior, self.config.model.z_dim, rng))
            .collect()
    }

    fn generate(&self, state: &mut RunState, n: usize) -> Result<GeneratedBatch> {
        let contexts = self.contexts(n, &mut state.rng);
        state.generator.generate(
            &contexts,
            self.data.seq_len,
            self.config.schedule.temperature,
            &mut state.rng,
        )
    }

    /// One pass of teacher-forced MLE over labeled and unlabeled sentences;
    /// unlabeled sentences draw a fresh class from the prior.
    fn mle_epoch(&self, state: &mut RunState, acc: &mut Accumulator) -> Result<()> {
        let mut pool: Vec<(TokenSequence, Class)> = self.data.labeled.clone();
        for s in &self.data.unlabeled {
            let class = self.prior.sample(&mut state.rng);
            pool.push((s.clone(), class));
        }
        pool.shuffle(&mut state.rng);
        let rate = self.config.model.dropout;
        for batch in batches(&pool, self.config.schedule.batch_size) {
            let r = state.generator.mle_update(
                batch,
                &mut state.optimizers.generator,
                dropout(rate, &mut state.rng),
            );
            if let Some((loss, info)) = self.guard(state, acc, r)? {
                acc.add("loss", loss);
                acc.add("grad_norm", info.grad_norm);
            }
        }
        Ok(())
    }

    /// One pass over the real sentences, each batch against as many fresh
    /// generated ones; the critic head follows on the same fakes.
    fn disc_epoch(&self, state: &mut RunState, acc: &mut Accumulator) -> Result<()> {
        let mut real: Vec<TokenSequence> = self.data.labeled.iter().map(|(s, _)| s.clone()).collect();
        real.extend(self.data.unlabeled.iter().cloned());
        real.shuffle(&mut state.rng);
        let s = &self.config.schedule;
        let rate = self.config.model.dropout;
        for batch in batches(&real, s.batch_size) {
            let fake = self.generate(state, batch.len())?.sequences;
            let r = state.discriminator.update(
                batch,
                &fake,
                s.strict_all_positions,
                &mut state.optimizers.discriminator,
                dropout(rate, &mut state.rng),
            );
            if let Some((loss, _)) = self.guard(state, acc, r)? {
                acc.add("loss", loss);
            }
            let r = state.discriminator.critic_update(&fake, &mut state.optimizers.disc_critic);
            if let Some((loss, _)) = self.guard(state, acc, r)? {
                acc.add("critic_loss", loss);
            }
        }
        let probe: Vec<TokenSequence> = real.iter().take(s.batch_size).cloned().collect();
        let fake = self.generate(state, probe.len())?.sequences;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        acc.add("real_score", mean(state.discriminator.sentence_scores(&probe, s.strict_all_positions)?));
        acc.add("fake_score", mean(state.discriminator.sentence_scores(&fake, s.strict_all_positions)?));
        Ok(())
    }

    /// One pass over the labeled sentences. With `adversarial` the loss
    /// includes generated sentences labeled by their conditioning class.
    fn cls_epoch(&self, state: &mut RunState, acc: &mut Accumulator, adversarial: bool) -> Result<()> {
        let mut real = self.data.labeled.clone();
        real.shuffle(&mut state.rng);
        let s = &self.config.schedule;
        let rate = self.config.model.dropout;
        for batch in batches(&real, s.batch_size) {
            let fake = self.generate(state, batch.len())?.labeled();
            let fake_term: &[(TokenSequence, Class)] = if adversarial { &fake } else { &[] };
            let r = state.classifier.update(
                batch,
                fake_term,
                s.beta,
                &mut state.optimizers.classifier,
                dropout(rate, &mut state.rng),
            );
            if let Some((loss, _)) = self.guard(state, acc, r)? {
                acc.add("loss", loss);
            }
            let r = state.classifier.critic_update(&fake, &mut state.optimizers.cls_critic);
            if let Some((loss, _)) = self.guard(state, acc, r)? {
                acc.add("critic_loss", loss);
            }
        }
        Ok(())
    }

    /// Policy-gradient batches on generated sentences rewarded by the
    /// discriminator and the classifier.
    fn policy_epoch(&self, state: &mut RunState, acc: &mut Accumulator) -> Result<()> {
        let s = &self.config.schedule;
        let horizon = self.data.seq_len - 1;
        for _ in 0..s.g_adv_batches {
            let generated = self.generate(state, s.batch_size)?;
            let disc = state.discriminator.score_steps(&generated.sequences)?;
            let cls = state.classifier.steps(&generated.sequences)?;
            let mut traces = Vec::with_capacity(generated.len());
            let mut reward = 0.0;
            for ((d, c), ctx) in disc.iter().zip(&cls).zip(&generated.contexts) {
                let c_series = c.series(ctx.class);
                let d_sentence = disc_sentence_score(d)?;
                let c_sentence = c.sentence()?[ctx.class.index()];
                reward += blend(d_sentence, c_sentence);
                traces.push(advantages(&d.actions(), &c_series.actions(), horizon, s.alpha_offset)?);
            }
            let (q, v) = masked_means(&traces);
            if s.reward_whitening {
                whiten(&mut traces);
            }
            let r = policy_gradient_update(
                &mut state.generator,
                &generated,
                &traces,
                &mut state.optimizers.generator,
            );
            if let Some(stats) = self.guard(state, acc, r)? {
                acc.add("reward", reward / generated.len() as f64);
                acc.add("surrogate", stats.surrogate);
                acc.add("mean_abs_advantage", stats.mean_abs_advantage);
                acc.add("grad_norm", stats.grad_norm);
                acc.add("blended_q", q);
                acc.add("blended_v", v);
            }
        }
        Ok(())
    }

    fn run_phase(&self, state: &mut RunState, phase: Phase, epoch: usize, hooks: &mut Hooks<'_>) -> Result<()> {
        let before = self.config.schedule.verify_blocks.then(|| Fingerprints::capture(state));
        let mut acc = Accumulator::default();
        match phase {
            Phase::PretrainG | Phase::GMle => self.mle_epoch(state, &mut acc)?,
            Phase::PretrainD | Phase::D => self.disc_epoch(state, &mut acc)?,
            Phase::PretrainC => self.cls_epoch(state, &mut acc, false)?,
            Phase::C => self.cls_epoch(state, &mut acc, true)?,
            Phase::GAdv => self.policy_epoch(state, &mut acc)?,
        }
        if let Some(before) = before {
            before.check(&Fingerprints::capture(state), phase)?;
        }
        let record = acc.finish(phase, epoch);
        info!(phase = phase.as_str(), epoch, values = ?record.values, "epoch done");
        if let Some(w) = hooks.metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        state.metrics.push(record);
        Ok(())
    }
}

fn context<'c>(config: &'c TrainConfig, data: &'c TrainingData, state: &RunState, abort: bool) -> Result<Ctx<'c>> {
    config.validate()?;
    data.check_vocab(state.vocab_size())?;
    if data.seq_len < 3 {
        return Err(Error::InvalidArgument("sequence length must be at least 3".into()));
    }
    Ok(Ctx {
        config,
        data,
        prior: config.class_prior()?,
        abort_on_non_finite: abort,
    })
}

/// Runs one epoch of a single phase outside the usual schedule.
pub fn run_phase(
    config: &TrainConfig,
    data: &TrainingData,
    state: &mut RunState,
    phase: Phase,
    hooks: &mut Hooks<'_>,
) -> Result<MetricRecord> {
    let ctx = context(config, data, state, false)?;
    ctx.run_phase(state, phase, state.progress.adversarial + 1, hooks)?;
    Ok(state.metrics.last().cloned().expect("phase recorded"))
}

/// Pretrains the generator, then the discriminator with its critic, then
/// the classifier with its critic. Stages already completed in `state`
/// are skipped, so an interrupted pretraining resumes where it stopped.
pub fn pretrain(config: &TrainConfig, data: &TrainingData, state: &mut RunState, hooks: &mut Hooks<'_>) -> Result<()> {
    let ctx = context(config, data, state, true)?;
    let s = &config.schedule;
    while state.progress.pretrain_g < s.pretrain_g {
        ctx.run_phase(state, Phase::PretrainG, state.progress.pretrain_g + 1, hooks)?;
        state.progress.pretrain_g += 1;
    }
    while state.progress.pretrain_d < s.pretrain_d {
        ctx.run_phase(state, Phase::PretrainD, state.progress.pretrain_d + 1, hooks)?;
        state.progress.pretrain_d += 1;
    }
    while state.progress.pretrain_c < s.pretrain_c {
        ctx.run_phase(state, Phase::PretrainC, state.progress.pretrain_c + 1, hooks)?;
        state.progress.pretrain_c += 1;
    }
    Ok(())
}

/// Adversarial epochs until `training_epochs` have completed. Each epoch
/// runs policy-gradient, MLE, discriminator and classifier phases in turn.
pub fn adversarial_train(
    config: &TrainConfig,
    data: &TrainingData,
    state: &mut RunState,
    hooks: &mut Hooks<'_>,
) -> Result<()> {
    let ctx = context(config, data, state, false)?;
    let s = &config.schedule;
    while state.progress.adversarial < s.training_epochs {
        let epoch = state.progress.adversarial + 1;
        for (phase, reps) in [
            (Phase::GAdv, s.g_adv_epochs),
            (Phase::GMle, s.g_mle_epochs),
            (Phase::D, s.d_epochs),
            (Phase::C, s.c_epochs),
        ] {
            for _ in 0..reps {
                ctx.run_phase(state, phase, epoch, hooks)?;
            }
        }
        state.progress.adversarial = epoch;
        if s.checkpoint_every > 0 && epoch.is_multiple_of(s.checkpoint_every) {
            if let Some((path, vocab)) = hooks.checkpoint {
                save_checkpoint(path, config, vocab, state)?;
            }
        }
    }
    Ok(())
}

/// Pretraining followed by adversarial training.
pub fn train(config: &TrainConfig, data: &TrainingData, state: &mut RunState, hooks: &mut Hooks<'_>) -> Result<()> {
    pretrain(config, data, state, hooks)?;
    adversarial_train(config, data, state, hooks)
}

/// The supervised-only baseline: the same classifier architecture trained
/// on labeled sentences alone for as many classifier epochs as a full run
/// gives the adversarial classifier.
pub fn train_base_classifier(config: &TrainConfig, data: &TrainingData, vocab_size: usize) -> Result<ClassifierParams> {
    config.validate()?;
    data.check_vocab(vocab_size)?;
    let m = &config.model;
    let s = &config.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba5e);
    let mut cls = ClassifierParams::new(vocab_size, m.embedding_dim, m.cls_hidden, m.cls_layers, &mut rng);
    let mut opt = Adam::new(config.optim.classifier());
    let epochs = s.pretrain_c + s.training_epochs * s.c_epochs;
    let mut skips = 0;
    for _ in 0..epochs {
        let mut real = data.labeled.clone();
        real.shuffle(&mut rng);
        for batch in batches(&real, s.batch_size) {
            match cls.update(batch, &[], s.beta, &mut opt, dropout(m.dropout, &mut rng)) {
                Ok(_) => skips = 0,
                Err(Error::NonFinite(what)) => {
                    skips += 1;
                    warn!(what, "skipping non-finite baseline update");
                    if skips >= s.max_consecutive_skips {
                        return Err(Error::Diverged(format!("baseline classifier: non-finite {what}")));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(cls)
}

/// A saved run: configuration, vocabulary and complete training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub vocabulary: Option<Vocabulary>,
    pub state: RunState,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, vocabulary: Option<&Vocabulary>, state: &RunState) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            vocabulary: vocabulary.cloned(),
            state: state.clone(),
        }
    }
}

/// Writes atomically: a temporary file next to `path` is renamed over it.
pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    vocabulary: Option<&Vocabulary>,
    state: &RunState,
) -> Result<()> {
    let ckpt = Checkpoint::new(config, vocabulary, state);
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        serde_json::to_writer(&mut w, &ckpt)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let malformed = |message: String| Error::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::SchemaMismatch {
            expected: CHECKPOINT_SCHEMA.to_string(),
            found: schema.to_string(),
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if ckpt.config.hash() != ckpt.config_hash {
        return Err(malformed("configuration hash does not match".into()));
    }
    Ok(ckpt)
}
