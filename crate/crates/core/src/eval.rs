//! Metrics, the labeled/unlabeled fraction grid and plot tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::classifier::{ClassifierParams, TieBreak};
use crate::config::TrainConfig;
use crate::corpus::{encode, split_and_subsample, Class, Example, SplitSpec, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::{Context, GeneratorParams};
use crate::trainer::{train, train_base_classifier, Hooks, RunState, TrainingData};

/// Counts with spam as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[Class], gold: &[Class]) -> Result<Self> {
        if predicted.len() != gold.len() {
            return Err(Error::LengthMismatch(format!(
                "{} predictions for {} gold labels",
                predicted.len(),
                gold.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut c = Confusion::default();
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (Class::Spam, Class::Spam) => c.true_pos += 1,
                (Class::Spam, Class::NonSpam) => c.false_pos += 1,
                (Class::NonSpam, Class::NonSpam) => c.true_neg += 1,
                (Class::NonSpam, Class::Spam) => c.false_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// F1 on the spam class; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        let tp = self.true_pos as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let precision = tp / (self.true_pos + self.false_pos) as f64;
        let recall = tp / (self.true_pos + self.false_neg) as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn accuracy(predicted: &[Class], gold: &[Class]) -> Result<f64> {
    Ok(Confusion::from_predictions(predicted, gold)?.accuracy())
}

pub fn f1(predicted: &[Class], gold: &[Class]) -> Result<f64> {
    f1_for(predicted, gold, Class::Spam)
}

/// F1 with `positive` as the positive class.
pub fn f1_for(predicted: &[Class], gold: &[Class], positive: Class) -> Result<f64> {
    let swap = |c: &Class| if positive == Class::Spam { *c } else { Class::from_index(1 - c.index()).expect("two classes") };
    let p: Vec<Class> = predicted.iter().map(swap).collect();
    let g: Vec<Class> = gold.iter().map(swap).collect();
    Ok(Confusion::from_predictions(&p, &g)?.f1())
}

/// `exp` of the mean next-token negative log-likelihood over every
/// predicted content position, conditioned on the gold class with `z = 0`.
pub fn perplexity(generator: &GeneratorParams, sentences: &[(TokenSequence, Class)]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in sentences.chunks(64) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let ctxs: Vec<Context> = chunk
            .iter()
            .map(|(_, c)| Context::real(*c, generator.z_dim))
            .collect();
        for (lps, s) in generator.sequence_logprobs(&seqs, &ctxs)?.iter().zip(&seqs) {
            let targets = s.content_len().saturating_sub(1);
            nll -= lps[..targets].iter().sum::<f64>();
            count += targets;
        }
    }
    if count == 0 {
        return Err(Error::NoContent);
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity"));
    }
    Ok(ppl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

pub fn evaluate_classifier(
    classifier: &ClassifierParams,
    test: &[(TokenSequence, Class)],
    tie: TieBreak,
) -> Result<ClassifierMetrics> {
    let seqs: Vec<TokenSequence> = test.iter().map(|(s, _)| s.clone()).collect();
    let gold: Vec<Class> = test.iter().map(|(_, c)| *c).collect();
    let mut predicted = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        predicted.extend(classifier.classify_batch(chunk, tie)?.into_iter().map(|(c, _)| c));
    }
    let confusion = Confusion::from_predictions(&predicted, &gold)?;
    Ok(ClassifierMetrics {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub f1: f64,
    pub perplexity: f64,
    pub confusion: Confusion,
}

/// Classifier metrics and generator perplexity on held-out sentences.
pub fn evaluate(state: &RunState, test: &[(TokenSequence, Class)], tie: TieBreak) -> Result<Evaluation> {
    let m = evaluate_classifier(&state.classifier, test, tie)?;
    Ok(Evaluation {
        accuracy: m.accuracy,
        f1: m.f1,
        perplexity: perplexity(&state.generator, test)?,
        confusion: m.confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full adversarial training.
    Full,
    /// Classifier trained on labeled data alone.
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: Variant,
    pub labeled_fraction: f64,
    /// `None` for the baseline, which never sees unlabeled data.
    pub unlabeled_fraction: Option<f64>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub perplexity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent below two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub variant: Variant,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: Option<f64>,
    pub accuracy: Option<Summary>,
    pub f1: Option<Summary>,
    pub perplexity: Option<Summary>,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One record per (labeled fraction, unlabeled fraction, seed).
    pub records: Vec<CellRecord>,
    /// One record per (labeled fraction, seed).
    pub baseline_records: Vec<CellRecord>,
    pub aggregates: Vec<CellAggregate>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn aggregate(&mut self) {
        let mut groups: BTreeMap<(Variant, u64, Option<u64>), Vec<&CellRecord>> = BTreeMap::new();
        for r in self.records.iter().chain(&self.baseline_records) {
            let key = (
                r.variant,
                r.labeled_fraction.to_bits(),
                r.unlabeled_fraction.map(f64::to_bits),
            );
            groups.entry(key).or_default().push(r);
        }
        self.aggregates = groups
            .into_values()
            .map(|rs| {
                let pick = |f: fn(&CellRecord) -> Option<f64>| {
                    Summary::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                CellAggregate {
                    variant: rs[0].variant,
                    labeled_fraction: rs[0].labeled_fraction,
                    unlabeled_fraction: rs[0].unlabeled_fraction,
                    accuracy: pick(|r| r.accuracy),
                    f1: pick(|r| r.f1),
                    perplexity: pick(|r| r.perplexity),
                    failures: rs.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect();
    }
}

/// Source material for a grid: the whole labeled and unlabeled pools.
#[derive(Clone, Debug)]
pub struct Pool {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub vocabulary: Vocabulary,
}

impl Pool {
    /// Builds the vocabulary over every text and encodes both pools.
    pub fn from_texts(
        labeled: &[(String, Class)],
        unlabeled: &[String],
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let texts: Vec<&str> = labeled
            .iter()
            .map(|(t, _)| t.as_str())
            .chain(unlabeled.iter().map(String::as_str))
            .collect();
        let vocabulary = Vocabulary::build(&texts, vocab_size)?;
        let labeled = labeled
            .iter()
            .map(|(t, c)| Ok(Example::labeled(encode(t, &vocabulary, max_len)?, *c)))
            .collect::<Result<_>>()?;
        let unlabeled = unlabeled
            .iter()
            .map(|t| Ok(Example::unlabeled(encode(t, &vocabulary, max_len)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            labeled,
            unlabeled,
            vocabulary,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub labeled_fractions: Vec<f64>,
    pub unlabeled_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub include_baseline: bool,
}

fn cell_data(pool: &Pool, split: SplitSpec) -> Result<(TrainingData, Vec<(TokenSequence, Class)>)> {
    let bundle = split_and_subsample(&pool.labeled, &pool.unlabeled, pool.vocabulary.clone(), split)?;
    Ok((TrainingData::from_bundle(&bundle)?, bundle.test_pairs()))
}

fn failed(variant: Variant, lf: f64, uf: Option<f64>, seed: u64, e: &Error) -> CellRecord {
    warn!(lf, ?uf, seed, error = %e, "grid cell failed");
    CellRecord {
        variant,
        labeled_fraction: lf,
        unlabeled_fraction: uf,
        seed,
        accuracy: None,
        f1: None,
        perplexity: None,
        error: Some(e.to_string()),
    }
}

/// Trains one full model per (labeled fraction, unlabeled fraction, seed)
/// and, optionally, one baseline per (labeled fraction, seed). The seed
/// drives both the split and the model initialization. A failing cell is
/// recorded and the sweep continues.
pub fn run_grid(config: &TrainConfig, pool: &Pool, grid: &GridSpec) -> Result<MetricsReport> {
    if grid.labeled_fractions.is_empty() || grid.unlabeled_fractions.is_empty() || grid.seeds.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one value per axis".into()));
    }
    let tie = config.schedule.tie_break;
    let mut report = MetricsReport::default();
    for &lf in &grid.labeled_fractions {
        for &seed in &grid.seeds {
            for &uf in &grid.unlabeled_fractions {
                let split = SplitSpec {
                    test_fraction: grid.test_fraction,
                    labeled_fraction: lf,
                    unlabeled_fraction: uf,
                    seed,
                };
                let run = || -> Result<CellRecord> {
                    let (data, test) = cell_data(pool, split)?;
                    let cfg = TrainConfig {
                        seed,
                        ..config.clone()
                    };
                    let mut state = RunState::new(&cfg, pool.vocabulary.len())?;
                    train(&cfg, &data, &mut state, &mut Hooks::default())?;
                    let e = evaluate(&state, &test, tie)?;
                    Ok(CellRecord {
                        variant: Variant::Full,
                        labeled_fraction: lf,
                        unlabeled_fraction: Some(uf),
                        seed,
                        accuracy: Some(e.accuracy),
                        f1: Some(e.f1),
                        perplexity: Some(e.perplexity),
                        error: None,
                    })
                };
                report
                    .records
                    .push(run().unwrap_or_else(|e| failed(Variant::Full, lf, Some(uf), seed, &e)));
            }
            if grid.include_baseline {
                let split = SplitSpec {
                    test_fraction: grid.test_fraction,
                    labeled_fraction: lf,
                    unlabeled_fraction: 0.0,
                    seed,
                };
                let run = || -> Result<CellRecord> {
                    let (data, test) = cell_data(pool, split)?;
                    let cfg = TrainConfig {
                        seed,
                        ..config.clone()
                    };
                    let cls = train_base_classifier(&cfg, &data, pool.vocabulary.len())?;
                    let m = evaluate_classifier(&cls, &test, tie)?;
                    Ok(CellRecord {
                        variant: Variant::Base,
                        labeled_fraction: lf,
                        unlabeled_fraction: None,
                        seed,
                        accuracy: Some(m.accuracy),
                        f1: Some(m.f1),
                        perplexity: None,
                        error: None,
                    })
                };
                report
                    .baseline_records
                    .push(run().unwrap_or_else(|e| failed(Variant::Base, lf, None, seed, &e)));
            }
        }
    }
    report.aggregate();
    report.metadata.insert("config_hash".into(), config.hash());
    report.metadata.insert("test_fraction".into(), grid.test_fraction.to_string());
    report.metadata.insert(
        "std".into(),
        "sample standard deviation over seeds of held-out test metrics; each seed draws its own split".into(),
    );
    report.metadata.insert("f1_positive_class".into(), Class::Spam.to_string());
    report.metadata.insert(
        "seeds".into(),
        grid.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub const ACCURACY_TABLE: &str = "accuracy_vs_labeled.tsv";
pub const F1_TABLE: &str = "f1_vs_labeled.tsv";
pub const PERPLEXITY_TABLE: &str = "perplexity_vs_unlabeled.tsv";

fn series_name(a: &CellAggregate) -> String {
    match (a.variant, a.unlabeled_fraction) {
        (Variant::Base, _) => "base".to_string(),
        (Variant::Full, Some(uf)) => format!("unlabeled={uf}"),
        (Variant::Full, None) => "full".to_string(),
    }
}

fn fmt_row(series: &str, x: f64, s: &Summary) -> String {
    let std = s.std.map_or_else(|| "NA".to_string(), |v| v.to_string());
    format!("{series}\t{x}\t{}\t{std}\t{}\n", s.mean, s.n)
}

/// Writes three TSV tables (`series, x, mean, std, n`; std is `NA` for a
/// single run):
/// accuracy against labeled fraction (one series per unlabeled fraction
/// plus the baseline), F1 against labeled fraction likewise, and
/// perplexity against unlabeled fraction (one series per labeled
/// fraction). Cells without any successful run are left out and reported
/// as warnings.
pub fn emit_plot_data(report: &MetricsReport, dir: &Path) -> Result<PlotOutput> {
    fs::create_dir_all(dir)?;
    let mut out = PlotOutput::default();
    let header = "series\tx\tmean\tstd\tn\n";
    let mut acc = String::from(header);
    let mut f1 = String::from(header);
    let mut ppl = String::from(header);
    let mut aggs: Vec<&CellAggregate> = report.aggregates.iter().collect();
    aggs.sort_by(|a, b| {
        (series_name(a), a.labeled_fraction)
            .partial_cmp(&(series_name(b), b.labeled_fraction))
            .expect("finite fractions")
    });
    for a in &aggs {
        let name = series_name(a);
        let cell = format!("{name} labeled={}", a.labeled_fraction);
        match &a.accuracy {
            Some(s) => acc.push_str(&fmt_row(&name, a.labeled_fraction, s)),
            None => out.warnings.push(format!("no accuracy for {cell}")),
        }
        match &a.f1 {
            Some(s) => f1.push_str(&fmt_row(&name, a.labeled_fraction, s)),
            None => out.warnings.push(format!("no F1 for {cell}")),
        }
        if a.variant == Variant::Full {
            match (&a.perplexity, a.unlabeled_fraction) {
                (Some(s), Some(uf)) => ppl.push_str(&fmt_row(&format!("labeled={}", a.labeled_fraction), uf, s)),
                _ => out.warnings.push(format!("no perplexity for {cell}")),
            }
        }
    }
    for (name, body) in [(ACCURACY_TABLE, acc), (F1_TABLE, f1), (PERPLEXITY_TABLE, ppl)] {
        let path = dir.join(name);
        fs::write(&path, body)?;
        out.files.push(path);
    }
    for w in &out.warnings {
        warn!("{w}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Class::{NonSpam as N, Spam as S};

    #[test]
    fn metric_examples() {
        let pred = [S, S, N, N];
        let gold = [S, N, N, S];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.5);
        assert!((f1(&pred, &gold).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f1(&[N, N], &[S, N]).unwrap(), 0.0);
        assert_eq!(accuracy(&[S, N], &[S, N]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[S], &[S, N]).is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[4.0]).unwrap().std, None);
        assert!(Summary::of(&[]).is_none());
    }
}
