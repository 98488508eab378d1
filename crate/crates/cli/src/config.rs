//! Experiment configuration: a TOML file of `[section]` headers and
//! `key = value` lines. Every key except `experiment.seed` has a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use knrm_core::analysis::PairSampling;
use knrm_core::data::SyntheticCorpusSpec;
use knrm_core::eval::{LabelCondition, Metric, MetricKey};
use knrm_core::model::KernelBank;
use knrm_core::training::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub kernels: KernelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    /// Directory holding the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: Option<u64>,
    pub trials: usize,
    pub output: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { seed: None, trials: 10, output: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Existing click log; when absent the synthetic corpus written by `gen` is used.
    pub path: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Alternative labels for the DIFF condition.
    pub truth: Option<PathBuf>,
    pub vocab_size: usize,
    pub truth_dim: usize,
    pub queries: usize,
    pub docs_per_query: usize,
    pub query_len: [usize; 2],
    pub doc_len: [usize; 2],
    pub relevance_noise: f64,
    pub impressions: u64,
    pub topics: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = SyntheticCorpusSpec::default();
        Self {
            path: None,
            vocab: None,
            truth: None,
            vocab_size: s.vocab_size,
            truth_dim: s.embedding_truth_dim,
            queries: s.num_queries,
            docs_per_query: s.docs_per_query,
            query_len: [s.query_len_range.0, s.query_len_range.1],
            doc_len: [s.doc_len_range.0, s.doc_len_range.1],
            relevance_noise: s.relevance_noise,
            impressions: s.impressions,
            topics: s.num_topics,
            validation_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub soft: usize,
    pub exact_sigma: f64,
    pub soft_sigma: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { soft: 10, exact_sigma: 1e-3, soft_sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub hinge_margin: f64,
    pub init_scale: f64,
    pub embedding_dim: usize,
    /// Word vectors in word2vec text format, copied over the random init.
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            adam_eps: t.adam_eps,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            hinge_margin: t.hinge_margin,
            init_scale: t.init_scale,
            embedding_dim: t.embedding_dim,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub agreement_k: Vec<usize>,
    pub pair_queries: usize,
    pub pair_docs: usize,
    pub pairs_per_bin: usize,
    /// Trial index pairs such as `[[0, 1], [0, 2]]`; empty picks pairs from the patterns.
    pub heatmaps: Vec<[usize; 2]>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let p = PairSampling::default();
        Self {
            agreement_k: vec![1, 3, 10],
            pair_queries: p.num_queries,
            pair_docs: p.docs_per_query,
            pairs_per_bin: p.per_bin,
            heatmaps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// `all_a`, `all_b`, `mixed`, `any` or `explicit`.
    pub method: String,
    pub size: usize,
    pub repeats: usize,
    /// Pattern A and B counts for `mixed`.
    pub mix: [usize; 2],
    /// Trial indices for `explicit`.
    pub members: Vec<usize>,
    pub grid_max: usize,
    /// e.g. `"DIFF NDCG@10"`; empty picks RAW MRR when single-click labels exist.
    pub grid_metric: String,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            method: "any".into(),
            size: knrm_core::ensemble::DEFAULT_SIZE,
            repeats: knrm_core::ensemble::DEFAULT_REPEATS,
            mix: [5, 5],
            members: Vec::new(),
            grid_max: 6,
            grid_metric: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.experiment
            .seed
            .context("experiment.seed is required (set it in the config or pass --seed)")
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        ensure!(self.experiment.trials >= 1, "experiment.trials must be at least 1");
        self.synthetic_spec()?.validate()?;
        self.kernel_bank()?;
        self.train_config(0).validate()?;
        for p in [&self.corpus.path, &self.corpus.vocab, &self.corpus.truth, &self.train.embeddings]
            .into_iter()
            .flatten()
        {
            let p = self.resolve(p);
            ensure!(p.is_file(), "input file {} does not exist", p.display());
        }
        ensure!(self.analysis.agreement_k.iter().all(|&k| k >= 1), "agreement_k values must be at least 1");
        ensure!(self.ensemble.size >= 1 && self.ensemble.repeats >= 1, "ensemble size and repeats must be at least 1");
        self.selection_method()?;
        self.grid_metric(&LabelCondition::ALL)?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticCorpusSpec> {
        let c = &self.corpus;
        Ok(SyntheticCorpusSpec {
            vocab_size: c.vocab_size,
            embedding_truth_dim: c.truth_dim,
            num_queries: c.queries,
            docs_per_query: c.docs_per_query,
            query_len_range: (c.query_len[0], c.query_len[1]),
            doc_len_range: (c.doc_len[0], c.doc_len[1]),
            relevance_noise: c.relevance_noise,
            seed: self.seed()?,
            impressions: c.impressions,
            num_topics: c.topics,
        })
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        let k = &self.kernels;
        Ok(KernelBank::with_soft_kernels(k.soft, k.exact_sigma, k.soft_sigma)?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            adam_eps: t.adam_eps,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            hinge_margin: t.hinge_margin,
            seed,
            init_scale: t.init_scale,
            embedding_dim: t.embedding_dim,
        }
    }

    pub fn pair_sampling(&self) -> PairSampling {
        PairSampling {
            num_queries: self.analysis.pair_queries,
            docs_per_query: self.analysis.pair_docs,
            per_bin: self.analysis.pairs_per_bin,
        }
    }

    pub fn selection_method(&self) -> Result<Method> {
        Ok(match self.ensemble.method.to_ascii_lowercase().as_str() {
            "all_a" => Method::AllA,
            "all_b" => Method::AllB,
            "mixed" => Method::Mixed,
            "any" => Method::Any,
            "explicit" => {
                ensure!(!self.ensemble.members.is_empty(), "ensemble.members must list trial indices for method \"explicit\"");
                Method::Explicit
            }
            other => bail!("unknown ensemble.method {other:?}"),
        })
    }

    /// The grid metric. When unset: RAW MRR, else DIFF NDCG@10, else SAME NDCG@10,
    /// whichever `available` allows first.
    pub fn grid_metric(&self, available: &[LabelCondition]) -> Result<MetricKey> {
        let text = self.ensemble.grid_metric.trim();
        if text.is_empty() {
            let key = if available.contains(&LabelCondition::Raw) {
                MetricKey::new(LabelCondition::Raw, Metric::Mrr)
            } else if available.contains(&LabelCondition::Diff) {
                MetricKey::new(LabelCondition::Diff, Metric::Ndcg(10))
            } else {
                MetricKey::new(LabelCondition::Same, Metric::Ndcg(10))
            };
            return Ok(key);
        }
        parse_metric_key(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    AllA,
    AllB,
    Mixed,
    Any,
    Explicit,
}

pub fn parse_metric_key(text: &str) -> Result<MetricKey> {
    let mut parts = text.split_whitespace();
    let (Some(cond), Some(metric), None) = (parts.next(), parts.next(), parts.next()) else {
        bail!("metric {text:?} must look like \"DIFF NDCG@10\" or \"RAW MRR\"");
    };
    let condition = match cond.to_ascii_uppercase().as_str() {
        "SAME" => LabelCondition::Same,
        "DIFF" => LabelCondition::Diff,
        "RAW" => LabelCondition::Raw,
        _ => bail!("unknown label condition {cond:?}"),
    };
    let metric = match metric.to_ascii_uppercase().as_str() {
        "MRR" => Metric::Mrr,
        m => match m.strip_prefix("NDCG@").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if k >= 1 => Metric::Ndcg(k),
            _ => bail!("unknown metric {metric:?}"),
        },
    };
    let key = MetricKey::new(condition, metric);
    ensure!(condition.metrics().contains(&metric), "{key} is not reported for its condition");
    Ok(key)
}
