//! Class-conditional bigram sources for controlled experiments.
//!
//! Both classes share a sparse transition graph over `w00, w01, ...`; each
//! class tilts the edge weights in opposite directions, so single
//! transitions carry weak evidence and whole sentences carry strong
//! evidence.

use rand::distr::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Class, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub words: usize,
    /// Words per sentence (before `<end>`).
    pub length: usize,
    /// `initial[c][w]`
    pub initial: Vec<Vec<f64>>,
    /// `transitions[c][from][to]`
    pub transitions: Vec<Vec<Vec<f64>>>,
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

impl MarkovSource {
    /// `branching` successors per word; `strength` is the log-odds tilt
    /// applied to every edge (positive for one class, negative for the
    /// other).
    pub fn new(words: usize, branching: usize, strength: f64, length: usize, seed: u64) -> Result<Self> {
        if words < 2 || branching == 0 || branching > words || length == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad source shape: {words} words, branching {branching}, length {length}"
            )));
        }
        if !strength.is_finite() {
            return Err(Error::InvalidArgument("strength must be finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Uniform::new(0.5, 1.5).expect("valid range");
        let tilt = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sign = |c: usize| if c == Class::Spam.index() { 1.0 } else { -1.0 };

        let mut initial = vec![vec![0.0; words]; NUM_CLASSES];
        for w in 0..words {
            let base = weight.sample(&mut rng);
            let u = tilt(&mut rng);
            for (c, init) in initial.iter_mut().enumerate() {
                init[w] = base * (strength * sign(c) * u).exp();
            }
        }
        let mut transitions = vec![vec![vec![0.0; words]; words]; NUM_CLASSES];
        for from in 0..words {
            for to in sample(&mut rng, words, branching) {
                let base = weight.sample(&mut rng);
                let u = tilt(&mut rng);
                for (c, t) in transitions.iter_mut().enumerate() {
                    t[from][to] = base * (strength * sign(c) * u).exp();
                }
            }
        }
        initial.iter_mut().for_each(|v| normalize(v));
        transitions.iter_mut().flatten().for_each(|v| normalize(v));
        Ok(Self {
            words,
            length,
            initial,
            transitions,
        })
    }

    pub fn word(i: usize) -> String {
        format!("w{i:02}")
    }

    fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
        let mut u: f64 = rng.random();
        for (i, &p) in probs.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        probs.iter().rposition(|&p| p > 0.0).expect("non-empty distribution")
    }

    pub fn sample_ids(&self, class: Class, rng: &mut impl Rng) -> Vec<usize> {
        let c = class.index();
        let mut out = Vec::with_capacity(self.length);
        let mut w = Self::draw(&self.initial[c], rng);
        out.push(w);
        while out.len() < self.length {
            w = Self::draw(&self.transitions[c][w], rng);
            out.push(w);
        }
        out
    }

    pub fn sample_text(&self, class: Class, rng: &mut impl Rng) -> String {
        self.sample_ids(class, rng)
            .into_iter()
            .map(Self::word)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn log_likelihood(&self, ids: &[usize], class: Class) -> f64 {
        let c = class.index();
        let Some(&first) = ids.first() else {
            return 0.0;
        };
        let mut ll = self.initial[c][first].ln();
        for w in ids.windows(2) {
            ll += self.transitions[c][w[0]][w[1]].ln();
        }
        ll
    }

    /// Bayes-optimal label under equal class priors.
    pub fn bayes_predict(&self, ids: &[usize]) -> Class {
        if self.log_likelihood(ids, Class::Spam) > self.log_likelihood(ids, Class::NonSpam) {
            Class::Spam
        } else {
            Class::NonSpam
        }
    }

    /// Balanced labeled texts (alternating classes) and unlabeled texts with
    /// hidden classes drawn uniformly.
    pub fn corpus(&self, labeled: usize, unlabeled: usize, seed: u64) -> (Vec<(String, Class)>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lab = (0..labeled)
            .map(|i| {
                let class = Class::ALL[i % NUM_CLASSES];
                (self.sample_text(class, &mut rng), class)
            })
            .collect();
        let unl = (0..unlabeled)
            .map(|_| {
                let class = Class::ALL[rng.random_range(0..NUM_CLASSES)];
                self.sample_text(class, &mut rng)
            })
            .collect();
        (lab, unl)
    }
}
