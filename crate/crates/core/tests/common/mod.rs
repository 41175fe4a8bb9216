#![allow(dead_code)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reviewgan::classifier::ClassifierParams;
use reviewgan::corpus::{encode, split_and_subsample, Class, Example, SplitSpec, TokenSequence, Vocabulary};
use reviewgan::corpus::{END, PAD, START};
use reviewgan::discriminator::DiscriminatorParams;
use reviewgan::eval::{evaluate, evaluate_classifier};
use reviewgan::generator::{ClassPrior, Context, GeneratorParams};
use reviewgan::nn::{Adam, AdamConfig, Dense, ParamSet};
use reviewgan::rl::{policy_gradient_update, AdvantageTrace};
use reviewgan::synthetic::MarkovSource;
use reviewgan::trainer::{adversarial_train, pretrain, train_base_classifier, Hooks, RunState, TrainingData};
use reviewgan::{TieBreak, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec()).unwrap()
}

/// `<start>`, 1..len-1 content tokens, `<end>` when it fits, then padding.
pub fn random_sequence(rng: &mut impl Rng, vocab: usize, len: usize) -> TokenSequence {
    let content = rng.random_range(1..len);
    let mut ids = vec![START];
    for _ in 0..content - 1 {
        ids.push(rng.random_range(4..vocab as u32));
    }
    if ids.len() < len && rng.random::<bool>() {
        ids.push(END);
    }
    ids.resize(len, PAD);
    TokenSequence::new(ids).unwrap()
}

// Finite differences -------------------------------------------------------

/// Largest relative disagreement between an analytic gradient and central
/// differences, `|a − n| / max(|a|, |n|, floor)`.
pub fn max_fd_error<P: ParamSet>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-5;
    let mut probe = params.clone();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.iter().copied().collect()).collect();
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = probe.tensors()[ti].as_slice_memory_order().unwrap()[j];
            probe.tensors_mut()[ti].as_slice_memory_order_mut().unwrap()[j] = orig + H;
            let up = loss(&probe);
            probe.tensors_mut()[ti].as_slice_memory_order_mut().unwrap()[j] = orig - H;
            let down = loss(&probe);
            probe.tensors_mut()[ti].as_slice_memory_order_mut().unwrap()[j] = orig;
            let n = (up - down) / (2.0 * H);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn toy_batch(seed: u64, vocab: usize, len: usize, n: usize) -> Vec<TokenSequence> {
    let mut r = rng(seed);
    (0..n).map(|_| random_sequence(&mut r, vocab, len)).collect()
}

fn labeled(seqs: Vec<TokenSequence>) -> Vec<(TokenSequence, Class)> {
    seqs.into_iter()
        .enumerate()
        .map(|(i, s)| (s, Class::ALL[i % 2]))
        .collect()
}

pub fn mle_fd_error() -> f64 {
    let gen = GeneratorParams::new(9, 4, 3, 5, 2, &mut rng(1));
    let batch = labeled(toy_batch(2, 9, 6, 4));
    let (_, grad) = gen.mle_loss_and_grad::<ChaCha8Rng>(&batch, None).unwrap();
    max_fd_error(&gen, &grad, |p| p.mle_loss(&batch).unwrap())
}

pub fn disc_fd_error(strict_all_positions: bool) -> f64 {
    let disc = DiscriminatorParams::new(9, 4, 5, 2, &mut rng(3));
    let real = toy_batch(4, 9, 6, 3);
    let fake = toy_batch(5, 9, 6, 4);
    let (_, grad) = disc
        .loss_and_grad::<ChaCha8Rng>(&real, &fake, strict_all_positions, None)
        .unwrap();
    max_fd_error(&disc, &grad, |p| p.loss(&real, &fake, strict_all_positions).unwrap())
}

pub fn cls_fd_error(beta: f64) -> f64 {
    let cls = ClassifierParams::new(9, 4, 5, 2, &mut rng(6));
    let real = labeled(toy_batch(7, 9, 6, 3));
    let fake = labeled(toy_batch(8, 9, 6, 4));
    let (_, grad) = cls.loss_and_grad::<ChaCha8Rng>(&real, &fake, beta, None).unwrap();
    max_fd_error(&cls, &grad, |p| p.loss(&real, &fake, beta).unwrap())
}

pub fn disc_critic_fd_error() -> f64 {
    let disc = DiscriminatorParams::new(9, 4, 5, 2, &mut rng(9));
    let fake = toy_batch(10, 9, 6, 4);
    let (_, grad) = disc.critic_loss_and_grad(&fake).unwrap();
    max_fd_error(&disc.critic, &grad, |d: &Dense| {
        let mut p = disc.clone();
        p.critic = d.clone();
        p.critic_loss(&fake).unwrap()
    })
}

pub fn cls_critic_fd_error() -> f64 {
    let cls = ClassifierParams::new(9, 4, 5, 2, &mut rng(11));
    let fake = labeled(toy_batch(12, 9, 6, 4));
    let (_, grad) = cls.critic_loss_and_grad(&fake).unwrap();
    max_fd_error(&cls.critic, &grad, |d: &Dense| {
        let mut p = cls.clone();
        p.critic = d.clone();
        p.critic_loss(&fake).unwrap()
    })
}

// Critic enumeration oracle -------------------------------------------------

/// Three actions after `<start>`, then `<end>`.
const ACTIONS: [u32; 3] = [4, 5, 6];
const POLICY: [f64; 3] = [0.2, 0.5, 0.3];

fn draw_action(r: &mut impl Rng) -> usize {
    let u: f64 = r.random();
    if u < POLICY[0] {
        0
    } else if u < POLICY[0] + POLICY[1] {
        1
    } else {
        2
    }
}

fn oracle_batch(r: &mut impl Rng, n: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| seq(&[START, ACTIONS[draw_action(r)], END]))
        .collect()
}

fn critic_schedule() -> [(f64, usize); 2] {
    [(1e-2, 2500), (1e-3, 1500)]
}

/// Trains only the discriminator's critic against a frozen discriminator
/// and compares its values with exact expectations:
/// `v[1] = Σ_a π(a)·q[1](a)` and `v[2](a) = q[2](a)`.
pub fn disc_critic_oracle_error() -> f64 {
    let mut disc = DiscriminatorParams::new(7, 4, 6, 1, &mut rng(20));
    let body = disc.body_fingerprint();
    let mut r = rng(21);
    for (lr, steps) in critic_schedule() {
        let mut opt = Adam::new(AdamConfig::new(lr, 0.0, None));
        for _ in 0..steps {
            let batch = oracle_batch(&mut r, 32);
            disc.critic_update(&batch, &mut opt).unwrap();
        }
    }
    assert_eq!(body, disc.body_fingerprint(), "critic training moved the body");
    let all: Vec<TokenSequence> = ACTIONS.iter().map(|&a| seq(&[START, a, END])).collect();
    let series = disc.score_steps(&all).unwrap();
    let expected_v1: f64 = series.iter().zip(POLICY).map(|(s, p)| p * s.q[1]).sum();
    let mut worst = (series[0].v[1] - expected_v1).abs();
    for s in &series {
        worst = worst.max((s.v[2] - s.q[2]).abs());
    }
    worst
}

pub fn cls_critic_oracle_error() -> f64 {
    let mut cls = ClassifierParams::new(7, 4, 6, 1, &mut rng(22));
    let body = cls.body_fingerprint();
    let mut r = rng(23);
    for (lr, steps) in critic_schedule() {
        let mut opt = Adam::new(AdamConfig::new(lr, 0.0, None));
        for _ in 0..steps {
            let batch: Vec<(TokenSequence, Class)> = oracle_batch(&mut r, 32)
                .into_iter()
                .map(|s| {
                    let c = Class::ALL[r.random_range(0..2)];
                    (s, c)
                })
                .collect();
            cls.critic_update(&batch, &mut opt).unwrap();
        }
    }
    assert_eq!(body, cls.body_fingerprint(), "critic training moved the body");
    let all: Vec<TokenSequence> = ACTIONS.iter().map(|&a| seq(&[START, a, END])).collect();
    let mut worst: f64 = 0.0;
    for class in Class::ALL {
        let series: Vec<_> = all.iter().map(|s| cls.score_steps(s, class).unwrap()).collect();
        let expected_v1: f64 = series.iter().zip(POLICY).map(|(s, p)| p * s.q[1]).sum();
        worst = worst.max((series[0].v[1] - expected_v1).abs());
        for s in &series {
            worst = worst.max((s.v[2] - s.q[2]).abs());
        }
    }
    worst
}

// Bandit --------------------------------------------------------------------

/// One-step bandit: the generator emits a single token after `<start>`.
/// Its support is `<end>`, `<unk>` and the three word tokens; only the
/// first word pays 1.
pub const BANDIT_WINNER: u32 = 4;

pub fn bandit_policy() -> GeneratorParams {
    GeneratorParams::new(7, 3, 0, 4, 1, &mut rng(30))
}

pub fn bandit_context() -> Context {
    Context::real(Class::Spam, 0)
}

pub fn bandit_probs(gen: &GeneratorParams) -> Vec<f64> {
    let d = gen
        .step_log_distributions(&seq(&[START, BANDIT_WINNER]), &bandit_context())
        .unwrap();
    d[0].iter().map(|l| l.exp()).collect()
}

fn bandit_reward(token: u32) -> f64 {
    if token == BANDIT_WINNER {
        1.0
    } else {
        0.0
    }
}

/// Policy-gradient updates until the winner's probability exceeds
/// `threshold`; `None` if `max_updates` is not enough.
pub fn bandit_updates_to(threshold: f64, max_updates: usize) -> Option<usize> {
    let mut gen = bandit_policy();
    let mut opt = Adam::new(AdamConfig::new(0.05, 0.0, None));
    let mut r = rng(31);
    let contexts = vec![bandit_context(); 16];
    for step in 1..=max_updates {
        let batch = gen.generate(&contexts, 2, 1.0, &mut r).unwrap();
        let rewards: Vec<f64> = batch.sequences.iter().map(|s| bandit_reward(s.ids()[1])).collect();
        let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let traces: Vec<AdvantageTrace> = rewards
            .iter()
            .map(|&rw| AdvantageTrace {
                blended_q: vec![rw],
                blended_v: vec![baseline],
                alpha: vec![1.0],
                advantage: vec![rw - baseline],
                mask: vec![true],
            })
            .collect();
        policy_gradient_update(&mut gen, &batch, &traces, &mut opt).unwrap();
        if bandit_probs(&gen)[BANDIT_WINNER as usize] > threshold {
            return Some(step);
        }
    }
    None
}

pub struct BaselineCheck {
    /// Largest `|mean_plain − mean_baseline| / combined standard error`.
    pub max_z_between: f64,
    /// Largest `|mean − exact| / standard error` over both estimators.
    pub max_z_exact: f64,
}

fn mean_and_se(samples: &[Vec<f64>], k: usize) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|g| g[k]).sum::<f64>() / n;
    let var = samples.iter().map(|g| (g[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Single-sample score-function gradients w.r.t. the output bias, taken
/// from the library's weighted log-likelihood gradient, with and without a
/// constant baseline, against the exact gradient `Σ_a π(a) r(a) (e_a − π)`.
pub fn baseline_unbiasedness(samples: usize, baseline: f64) -> BaselineCheck {
    let gen = bandit_policy();
    let pi = bandit_probs(&gen);
    let v = pi.len();
    let mut exact = vec![0.0; v];
    for a in 0..v {
        let rw = bandit_reward(a as u32);
        for k in 0..v {
            let e = if k == a { 1.0 } else { 0.0 };
            exact[k] += pi[a] * rw * (e - pi[k]);
        }
    }
    let mut r = rng(32);
    let ctx = vec![bandit_context()];
    let estimate = |b: f64, r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..samples)
            .map(|_| {
                let batch = gen.generate(&ctx, 2, 1.0, r).unwrap();
                let w = bandit_reward(batch.sequences[0].ids()[1]) - b;
                let (_, _, grad) = gen
                    .weighted_nll::<ChaCha8Rng>(&batch.sequences, &batch.contexts, &[vec![w]], None, true)
                    .unwrap();
                // Gradient of −w·log π(a); ascent direction is its negation.
                grad.unwrap().output.b.iter().map(|g| -g).collect()
            })
            .collect()
    };
    let plain = estimate(0.0, &mut r);
    let with_baseline = estimate(baseline, &mut r);
    let mut check = BaselineCheck {
        max_z_between: 0.0,
        max_z_exact: 0.0,
    };
    for k in 0..v {
        if pi[k] == 0.0 {
            continue;
        }
        let (m0, s0) = mean_and_se(&plain, k);
        let (m1, s1) = mean_and_se(&with_baseline, k);
        check.max_z_between = check.max_z_between.max((m0 - m1).abs() / (s0 * s0 + s1 * s1).sqrt());
        check.max_z_exact = check
            .max_z_exact
            .max((m0 - exact[k]).abs() / s0)
            .max((m1 - exact[k]).abs() / s1);
    }
    check
}

// Synthetic corpus ----------------------------------------------------------

pub const SYNTH_WORDS: usize = 50;
pub const SYNTH_BRANCHING: usize = 6;
pub const SYNTH_STRENGTH: f64 = 1.2;
pub const SYNTH_WORDS_PER_SENTENCE: usize = 18;
pub const SYNTH_T: usize = 20;

pub fn synthetic_source() -> MarkovSource {
    MarkovSource::new(SYNTH_WORDS, SYNTH_BRANCHING, SYNTH_STRENGTH, SYNTH_WORDS_PER_SENTENCE, 11).unwrap()
}

/// Exact per-token conditional entropy (nats) of the source given the
/// class, counting the deterministic `<end>` token, averaged over classes.
pub fn source_entropy_per_token(src: &MarkovSource) -> f64 {
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
    let mut total = 0.0;
    for c in 0..2 {
        let mut marginal = src.initial[c].clone();
        let mut hc = h(&marginal);
        for _ in 1..src.length {
            let mut next = vec![0.0; src.words];
            for (i, &pi) in marginal.iter().enumerate() {
                hc += pi * h(&src.transitions[c][i]);
                for (j, &t) in src.transitions[c][i].iter().enumerate() {
                    next[j] += pi * t;
                }
            }
            marginal = next;
        }
        total += hc / (src.length + 1) as f64;
    }
    total / 2.0
}

pub fn synthetic_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.model.max_len = SYNTH_T;
    c.model.vocab_size = SYNTH_WORDS + 4;
    c.model.z_dim = 8;
    c.model.embedding_dim = 16;
    c.model.gen_hidden = 64;
    c.model.gen_layers = 1;
    c.model.disc_hidden = 32;
    c.model.disc_layers = 1;
    c.model.cls_hidden = 32;
    c.model.cls_layers = 1;
    c.model.dropout = 0.0;
    c.optim.disc_lr = 1e-3;
    c.optim.cls_lr = 1e-3;
    c.schedule.batch_size = 32;
    c.schedule.pretrain_g = 20;
    c.schedule.pretrain_d = 2;
    c.schedule.pretrain_c = 20;
    c.schedule.training_epochs = 40;
    c.schedule.g_adv_batches = 16;
    c
}

pub struct SyntheticData {
    pub vocabulary: Vocabulary,
    pub data: TrainingData,
    pub test: Vec<(TokenSequence, Class)>,
}

/// 500 balanced labeled sentences split 400 test / 100 train, plus 2,000
/// unlabeled ones; the seed picks both the sample and the split.
pub fn synthetic_data(seed: u64) -> SyntheticData {
    let src = synthetic_source();
    let (lab, unl) = src.corpus(500, 2000, 100 + seed);
    let words: Vec<String> = (0..SYNTH_WORDS).map(MarkovSource::word).collect();
    let vocabulary = Vocabulary::from_words(words).unwrap();
    let labeled: Vec<Example> = lab
        .iter()
        .map(|(t, c)| Example::labeled(encode(t, &vocabulary, SYNTH_T).unwrap(), *c))
        .collect();
    let unlabeled: Vec<Example> = unl
        .iter()
        .map(|t| Example::unlabeled(encode(t, &vocabulary, SYNTH_T).unwrap()))
        .collect();
    let split = SplitSpec {
        test_fraction: 0.8,
        labeled_fraction: 1.0,
        unlabeled_fraction: 1.0,
        seed,
    };
    let bundle = split_and_subsample(&labeled, &unlabeled, vocabulary.clone(), split).unwrap();
    SyntheticData {
        vocabulary,
        data: TrainingData::from_bundle(&bundle).unwrap(),
        test: bundle.test_pairs(),
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub seed: u64,
    pub full_accuracy: f64,
    pub pretrained_accuracy: f64,
    pub base_accuracy: f64,
    pub perplexity: f64,
    pub pretrained_perplexity: f64,
    pub seconds: f64,
}

pub fn synthetic_run(seed: u64) -> SyntheticRun {
    let t0 = Instant::now();
    let cfg = synthetic_config(seed);
    let SyntheticData { vocabulary, data, test } = synthetic_data(seed);
    let tie = TieBreak::NonSpam;
    let base = train_base_classifier(&cfg, &data, vocabulary.len()).unwrap();
    let base_accuracy = evaluate_classifier(&base, &test, tie).unwrap().accuracy;
    let mut state = RunState::new(&cfg, vocabulary.len()).unwrap();
    pretrain(&cfg, &data, &mut state, &mut Hooks::default()).unwrap();
    let pre = evaluate(&state, &test, tie).unwrap();
    adversarial_train(&cfg, &data, &mut state, &mut Hooks::default()).unwrap();
    let full = evaluate(&state, &test, tie).unwrap();
    SyntheticRun {
        seed,
        full_accuracy: full.accuracy,
        pretrained_accuracy: pre.accuracy,
        base_accuracy,
        perplexity: full.perplexity,
        pretrained_perplexity: pre.perplexity,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// Training-loop fidelity ----------------------------------------------------

/// Eight sentences of length 16 and a tiny model, every epoch count 1.
pub fn smoke_setup() -> (TrainConfig, TrainingData, Vocabulary) {
    let src = MarkovSource::new(10, 3, 1.0, 14, 5).unwrap();
    let (lab, unl) = src.corpus(6, 2, 9);
    let words: Vec<String> = (0..10).map(MarkovSource::word).collect();
    let vocabulary = Vocabulary::from_words(words).unwrap();
    let labeled = lab
        .iter()
        .map(|(t, c)| (encode(t, &vocabulary, 16).unwrap(), *c))
        .collect();
    let unlabeled = unl.iter().map(|t| encode(t, &vocabulary, 16).unwrap()).collect();
    let data = TrainingData::new(labeled, unlabeled).unwrap();
    let mut c = TrainConfig::default();
    c.seed = 4;
    c.model.max_len = 16;
    c.model.vocab_size = vocabulary.len();
    c.model.z_dim = 3;
    c.model.embedding_dim = 6;
    c.model.gen_hidden = 8;
    c.model.disc_hidden = 6;
    c.model.cls_hidden = 6;
    c.model.dropout = 0.25;
    c.schedule.batch_size = 4;
    c.schedule.pretrain_g = 1;
    c.schedule.pretrain_d = 1;
    c.schedule.pretrain_c = 1;
    c.schedule.training_epochs = 1;
    c.schedule.g_adv_batches = 2;
    (c, data, vocabulary)
}

pub fn uniform_prior() -> ClassPrior {
    ClassPrior::uniform()
}

use reviewgan::trainer::{load_checkpoint, run_phase, save_checkpoint, train, Phase};

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn prints(state: &RunState) -> [String; 5] {
    [
        state.generator.fingerprint(),
        state.discriminator.body_fingerprint(),
        state.discriminator.critic_fingerprint(),
        state.classifier.body_fingerprint(),
        state.classifier.critic_fingerprint(),
    ]
}

/// Hashes every parameter block around each phase, independently of the
/// trainer's own checks, and demands that exactly the phase's blocks move.
pub fn check_block_coordinates() -> Result<(), String> {
    let (mut cfg, data, vocab) = smoke_setup();
    cfg.schedule.verify_blocks = false;
    let mut state = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    let names = ["generator", "disc body", "disc critic", "cls body", "cls critic"];
    let cases: [(Phase, [bool; 5]); 7] = [
        (Phase::PretrainG, [true, false, false, false, false]),
        (Phase::PretrainD, [false, true, true, false, false]),
        (Phase::PretrainC, [false, false, false, true, true]),
        (Phase::GAdv, [true, false, false, false, false]),
        (Phase::GMle, [true, false, false, false, false]),
        (Phase::D, [false, true, true, false, false]),
        (Phase::C, [false, false, false, true, true]),
    ];
    for (phase, moves) in cases {
        let before = prints(&state);
        run_phase(&cfg, &data, &mut state, phase, &mut Hooks::default()).map_err(|e| e.to_string())?;
        let after = prints(&state);
        for i in 0..5 {
            ensure((before[i] != after[i]) == moves[i], || {
                format!("{}: {} moved={} expected {}", phase.as_str(), names[i], before[i] != after[i], moves[i])
            })?;
        }
    }
    Ok(())
}

/// Metrics records come out in the nesting order of the training loop.
pub fn check_epoch_accounting() -> Result<(), String> {
    let (mut cfg, data, vocab) = smoke_setup();
    let s = &mut cfg.schedule;
    (s.pretrain_g, s.pretrain_d, s.pretrain_c) = (2, 1, 3);
    (s.training_epochs, s.g_adv_epochs, s.g_mle_epochs, s.d_epochs, s.c_epochs) = (2, 2, 1, 3, 1);
    let mut state = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    train(&cfg, &data, &mut state, &mut Hooks::default()).map_err(|e| e.to_string())?;
    let mut expected: Vec<(Phase, usize)> = Vec::new();
    expected.extend((1..=2).map(|e| (Phase::PretrainG, e)));
    expected.push((Phase::PretrainD, 1));
    expected.extend((1..=3).map(|e| (Phase::PretrainC, e)));
    for epoch in 1..=2 {
        for (phase, reps) in [(Phase::GAdv, 2), (Phase::GMle, 1), (Phase::D, 3), (Phase::C, 1)] {
            expected.extend(std::iter::repeat_n((phase, epoch), reps));
        }
    }
    let got: Vec<(Phase, usize)> = state.metrics.iter().map(|m| (m.phase, m.epoch)).collect();
    ensure(got == expected, || format!("phase order {got:?}"))?;
    let p = &state.progress;
    ensure(
        (p.pretrain_g, p.pretrain_d, p.pretrain_c, p.adversarial) == (2, 1, 3, 2),
        || format!("progress {p:?}"),
    )?;
    let pg = state.metrics.iter().find(|m| m.phase == Phase::GAdv).unwrap();
    ensure(pg.batches == cfg.schedule.g_adv_batches, || format!("{} policy batches", pg.batches))
}

pub fn check_identity() -> Result<(), String> {
    let (mut cfg, data, vocab) = smoke_setup();
    cfg.schedule.training_epochs = 0;
    let mut state = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    let before = state.clone();
    adversarial_train(&cfg, &data, &mut state, &mut Hooks::default()).map_err(|e| e.to_string())?;
    ensure(state == before, || "zero epochs changed the state".into())
}

/// save → load gives the same state; saving again gives the same bytes; a
/// truncated file is rejected.
pub fn check_checkpoint_round_trip() -> Result<(), String> {
    let (cfg, data, vocab) = smoke_setup();
    let mut state = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    train(&cfg, &data, &mut state, &mut Hooks::default()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    save_checkpoint(&a, &cfg, Some(&vocab), &state).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&a).map_err(|e| e.to_string())?;
    ensure(loaded.state == state, || "loaded state differs".into())?;
    ensure(loaded.config == cfg, || "loaded config differs".into())?;
    ensure(loaded.vocabulary.as_ref() == Some(&vocab), || "loaded vocabulary differs".into())?;
    save_checkpoint(&b, &loaded.config, loaded.vocabulary.as_ref(), &loaded.state).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ensure(ba == bb, || "re-saved checkpoint is not byte-identical".into())?;
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &ba[..ba.len() / 2]).unwrap();
    ensure(load_checkpoint(&cut).is_err(), || "truncated checkpoint loaded".into())
}

/// Three adversarial epochs in one go against one epoch, a checkpoint
/// round trip, then two more: identical metrics and final state.
pub fn check_continuation() -> Result<(), String> {
    let (mut cfg, data, vocab) = smoke_setup();
    cfg.schedule.training_epochs = 3;
    let mut straight = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    train(&cfg, &data, &mut straight, &mut Hooks::default()).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.json");
    let mut first = cfg.clone();
    first.schedule.training_epochs = 1;
    let mut resumed = RunState::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    train(&first, &data, &mut resumed, &mut Hooks::default()).map_err(|e| e.to_string())?;
    save_checkpoint(&path, &cfg, Some(&vocab), &resumed).map_err(|e| e.to_string())?;
    let mut resumed = load_checkpoint(&path).map_err(|e| e.to_string())?.state;
    train(&cfg, &data, &mut resumed, &mut Hooks::default()).map_err(|e| e.to_string())?;
    ensure(resumed.metrics == straight.metrics, || "metrics diverged after resume".into())?;
    ensure(resumed == straight, || "final state diverged after resume".into())
}

pub fn fidelity_checks() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("block-coordinate hashes", check_block_coordinates()),
        ("epoch accounting", check_epoch_accounting()),
        ("zero-epoch identity", check_identity()),
        ("checkpoint round trip", check_checkpoint_round_trip()),
        ("continuation equivalence", check_continuation()),
    ]
}

/// Independent statement of the sequence rules.
pub fn well_formed(ids: &[u32]) -> bool {
    if ids.is_empty() {
        return false;
    }
    if ids.iter().all(|&t| t == PAD) {
        return true;
    }
    if ids[0] != START {
        return false;
    }
    let content = ids.iter().take_while(|&&t| t != PAD).count();
    let (head, tail) = ids.split_at(content);
    tail.iter().all(|&t| t == PAD)
        && !head[1..].contains(&START)
        && head
            .iter()
            .position(|&t| t == END)
            .is_none_or(|p| p + 1 == content)
}

/// Random id vectors: acceptance must agree with [`well_formed`], and
/// accepted sequences must carry the non-pad prefix as their mask.
pub fn check_sequence_invariants(cases: usize) -> Result<(), String> {
    let mut r = rng(99);
    let mut accepted = 0;
    for _ in 0..cases {
        let len = r.random_range(0..12);
        // Bias toward plausible shapes so both outcomes are common.
        let mut ids: Vec<u32> = (0..len).map(|_| r.random_range(0..8)).collect();
        if len > 0 && r.random::<f64>() < 0.7 {
            ids[0] = START;
            let content = r.random_range(1..=len);
            for t in ids.iter_mut().skip(content) {
                *t = PAD;
            }
            for t in ids.iter_mut().take(content).skip(1) {
                if *t == START || *t == PAD || (*t == END && r.random::<f64>() < 0.8) {
                    *t = 4;
                }
            }
        }
        let ok = TokenSequence::new(ids.clone());
        ensure(ok.is_ok() == well_formed(&ids), || format!("disagreement on {ids:?}"))?;
        if let Ok(s) = ok {
            accepted += 1;
            let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
            ensure(s.mask() == mask.as_slice(), || format!("mask of {ids:?}"))?;
        }
    }
    ensure(accepted > cases / 4, || format!("only {accepted} of {cases} cases were valid"))
}
