//! Stage drivers behind the command-line tool, and the working-directory
//! layout they share.
//!
//! ```text
//! workdir/
//!   pretrain/{encoder.json, loss.jsonl}
//!   candidates/{candidates.jsonl, spans.jsonl, phrase_scores.jsonl, threshold.json}
//!   iter_k/trainset/{pairs,triplets,classification}.tsv
//!   iter_k/checkpoint/{encoder,head}.json
//!   iter_k/predictions/{clusters.json, values.tsv}
//!   iter_k/metrics/{loss.jsonl, summary.json, metrics.csv}
//! ```

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{Backend, CalibrationConfig, CandidateFilter, ExternalConfig, Paths, PipelineConfig};

use crate::corpus::{
    self, generate_synthetic_corpus, load_clusters, load_corpus, load_gold_spans, load_seed_sets,
    match_seeds_to_occurrences, Clusters, GoldSpan, GoldSpans, GroundTruthSchema, Product, ProductIndex,
    SeedSets, Span,
};
use crate::discovery::{self, embed_candidates, IterationReport, Model, RunInputs};
use crate::encoder::{
    load_encoder, load_head, mlm_pretrain, save_encoder, save_head, ContextEncoder, ExternalEncoder, MlmConfig,
    TinyConfig, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics::{corpus_recall, entity_prf, MetricsReport};
use crate::projection::{project_values, write_projection, ProjectedValue};
use crate::seeding::{stage_rng, stage_seed};
use crate::segmenter::{
    calibrate_candidate_threshold, calibrate_threshold, default_grid, generate_candidates, load_candidates,
    score_corpus, write_candidates, write_phrase_scores, Candidates, LabeledScores, PhraseScoreRow,
};
use crate::trainer::{write_loss_history, write_training_set};
use crate::{Encoder, Head, Real};

/// Paths of every artifact under a working directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn encoder_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("encoder.json")
    }

    pub fn pretrain_loss(&self) -> PathBuf {
        self.root.join("pretrain").join("loss.jsonl")
    }

    pub fn candidates_file(&self) -> PathBuf {
        self.root.join("candidates").join("candidates.jsonl")
    }

    pub fn candidate_spans(&self) -> PathBuf {
        self.root.join("candidates").join("spans.jsonl")
    }

    pub fn phrase_scores(&self) -> PathBuf {
        self.root.join("candidates").join("phrase_scores.jsonl")
    }

    pub fn threshold_file(&self) -> PathBuf {
        self.root.join("candidates").join("threshold.json")
    }

    pub fn iteration(&self, k: usize) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    pub fn trainset(&self, k: usize) -> PathBuf {
        self.iteration(k).join("trainset")
    }

    pub fn checkpoint(&self, k: usize) -> PathBuf {
        self.iteration(k).join("checkpoint")
    }

    pub fn predictions(&self, k: usize) -> PathBuf {
        self.iteration(k).join("predictions")
    }

    pub fn metrics(&self, k: usize) -> PathBuf {
        self.iteration(k).join("metrics")
    }

    /// Indices of the iteration directories present, ascending.
    pub fn iterations(&self) -> Vec<usize> {
        let Ok(entries) = std::fs::read_dir(&self.root) else {
            return Vec::new();
        };
        let mut out: Vec<usize> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("iter_")?.parse().ok())
            .collect();
        out.sort_unstable();
        out
    }

    fn create(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_products(config: &PipelineConfig) -> Result<Vec<Product>> {
    let path = config.require("paths.corpus")?;
    let load = load_corpus(path, config.max_tokens)?;
    if load.rejected_empty > 0 {
        log::warn!("{} records with empty titles were skipped", load.rejected_empty);
    }
    if load.truncated > 0 {
        log::warn!("{} titles were cut to {} tokens", load.truncated, config.max_tokens);
    }
    if load.products.is_empty() {
        return Err(Error::config("paths.corpus", "corpus has no products"));
    }
    Ok(load.products)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Masked-LM pretraining of a fresh tiny encoder; writes the checkpoint and loss log.
pub fn pretrain(config: &PipelineConfig) -> Result<(Encoder, Vec<f64>)> {
    config.validate()?;
    if config.backend != Backend::Tiny {
        return Err(Error::config("backend", "only the tiny backend can be pretrained"));
    }
    let products = load_products(config)?;
    let wd = Workdir::new(&config.paths.workdir);
    let vocab = Vocab::from_corpus(&products);
    let tiny = TinyConfig {
        seed: stage_seed(config.seed, "init", 0),
        ..config.encoder.clone()
    };
    let mut encoder = Encoder::new(tiny, vocab)?;
    let mlm = MlmConfig {
        seed: stage_seed(config.seed, "pretrain", 0),
        ..config.pretrain.clone()
    };
    let losses = mlm_pretrain(&mut encoder, &products, &mlm).map_err(|e| e.in_stage("pretrain", None))?;
    wd.create(&wd.root().join("pretrain"))?;
    save_encoder(wd.encoder_checkpoint(), &encoder)?;
    let path = wd.pretrain_loss();
    let rows: Vec<String> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| serde_json::to_string(&LossRow { step, loss }))
        .collect::<std::result::Result<_, _>>()?;
    std::fs::write(&path, rows.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    log::info!(
        "pretrained {} steps; final loss {:.4}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok((encoder, losses))
}

/// The encoder a stage reads from: a tiny checkpoint or an external process.
pub enum EncoderHandle {
    Tiny(Encoder),
    External(ExternalEncoder),
}

impl EncoderHandle {
    pub fn as_encoder(&self) -> &dyn ContextEncoder<Real> {
        match self {
            EncoderHandle::Tiny(e) => e,
            EncoderHandle::External(e) => e,
        }
    }
}

/// The pretrained encoder of `config`'s backend.
pub fn open_encoder(config: &PipelineConfig) -> Result<EncoderHandle> {
    match config.backend {
        Backend::Tiny => {
            let path = Workdir::new(&config.paths.workdir).encoder_checkpoint();
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "no encoder checkpoint at {}; run pretrain first",
                    path.display()
                )));
            }
            Ok(EncoderHandle::Tiny(load_encoder(path)?))
        }
        Backend::External => Ok(EncoderHandle::External(ExternalEncoder::spawn(
            &config.external.program,
            &config.external.args,
        )?)),
    }
}

#[derive(Clone, Debug)]
pub struct CandidateOutput {
    pub candidates: Candidates,
    /// Per-product spans of the segmentation.
    pub spans: BTreeMap<String, Vec<Span>>,
    pub threshold: f64,
}

impl CandidateOutput {
    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.candidates.iter().map(|(t, c)| (t.clone(), c.len())).collect()
    }
}

fn to_span_file(spans: &BTreeMap<String, Vec<Span>>) -> GoldSpans {
    spans
        .iter()
        .map(|(id, s)| {
            let rows = s
                .iter()
                .map(|s| GoldSpan {
                    start: s.start,
                    end: s.end,
                    attribute: None,
                })
                .collect();
            (id.clone(), rows)
        })
        .collect()
}

/// Segments every title into candidate values and writes the candidate dump.
///
/// When gold spans are configured, the threshold is chosen on the leading
/// `calibration.products` products that carry gold spans.
pub fn candidates(
    config: &PipelineConfig,
    products: &[Product],
    encoder: &dyn ContextEncoder<Real>,
) -> Result<CandidateOutput> {
    config.validate()?;
    let wd = Workdir::new(&config.paths.workdir);
    let scores = score_corpus(encoder, products)?;
    let mut segmentation = config.segmentation.clone();
    if config.calibration.products > 0 {
        if let Some(path) = config.optional("paths.gold_spans")? {
            let gold = load_gold_spans(path)?;
            let validation: Vec<(&Product, &PhraseScoreRow, Vec<Span>)> = products
                .iter()
                .zip(&scores)
                .filter_map(|(p, s)| gold.get(&p.id).map(|g| (p, s, g.iter().map(GoldSpan::span).collect())))
                .take(config.calibration.products)
                .collect();
            let grid = default_grid(config.calibration.grid);
            let n = validation.len();
            if validation.is_empty() {
                log::warn!("no product has gold spans; keeping threshold {}", segmentation.threshold);
            } else {
                segmentation.threshold = if config.calibration.merged {
                    let gold = validation.iter().map(|(p, _, g)| (p.id.clone(), g.clone())).collect();
                    calibrate_candidate_threshold(products, &scores, &segmentation, &gold, &grid)?
                } else {
                    let labeled: Vec<LabeledScores> = validation
                        .into_iter()
                        .map(|(_, s, gold)| LabeledScores { scores: s.scores.clone(), gold })
                        .collect();
                    calibrate_threshold(&labeled, &grid)?
                };
                log::info!("threshold {:.3} chosen on {n} products", segmentation.threshold);
            }
        }
    }
    let (mut found, spans) = generate_candidates(products, &scores, &segmentation)?;
    let min = config.candidates.min_occurrences;
    for set in found.values_mut() {
        set.retain(|_, occ| occ.len() >= min);
    }
    found.retain(|_, set| !set.is_empty());

    wd.create(&wd.root().join("candidates"))?;
    write_candidates(wd.candidates_file(), &found)?;
    write_phrase_scores(wd.phrase_scores(), &scores)?;
    corpus::write_gold_spans(wd.candidate_spans(), &to_span_file(&spans))?;
    write_json(&wd.threshold_file(), &segmentation.threshold)?;
    Ok(CandidateOutput {
        candidates: found,
        spans,
        threshold: segmentation.threshold,
    })
}

/// Summary record of one iteration, written as `metrics/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub eps: BTreeMap<String, f64>,
    pub clusters: usize,
    pub fresh_clusters: usize,
    pub coverage: f64,
    pub change_rate: f64,
    pub pairs: usize,
    pub triplets: usize,
    pub classification_examples: usize,
    pub ari: Option<f64>,
    pub jaccard: Option<f64>,
    pub nmi: Option<f64>,
    pub cluster_recall: Option<f64>,
    /// Cluster recall of the density clusters alone, before classifier rescue.
    pub density_cluster_recall: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub candidates: CandidateOutput,
    pub iterations: Vec<IterationSummary>,
    pub reports: Vec<IterationReport>,
}

fn summarize(report: &IterationReport, gold: Option<&Clusters>) -> Result<IterationSummary> {
    let sets = &report.predictions;
    let clusters: usize = sets.iter().map(|s| s.clusters().len()).sum();
    let fresh = sets
        .iter()
        .flat_map(|s| s.clusters().into_keys())
        .filter(|c| c.starts_with("new_"))
        .count();
    let assigned: usize = sets.iter().map(|s| s.assigned.len()).sum();
    let total: usize = sets.iter().map(|s| s.assigned.len() + s.noise.len()).sum();
    let metric = |m: &str| report.metrics.as_ref().and_then(|r| r.get("*", m));
    let density_cluster_recall = match gold {
        Some(g) => {
            let density: Vec<_> = sets.iter().map(|s| s.density_only()).collect();
            Some(crate::metrics::cluster_recall(&discovery::assignments(&density), g)?)
        }
        None => None,
    };
    Ok(IterationSummary {
        iteration: report.iteration,
        eps: report.eps.clone(),
        clusters,
        fresh_clusters: fresh,
        coverage: if total == 0 { 0.0 } else { assigned as f64 / total as f64 },
        change_rate: report.change_rate,
        pairs: report.training.pairs.len(),
        triplets: report.training.triplets.len(),
        classification_examples: report.training.classification.len(),
        ari: metric("ari"),
        jaccard: metric("jaccard"),
        nmi: metric("nmi"),
        cluster_recall: metric("cluster_recall"),
        density_cluster_recall,
    })
}

/// The whole pipeline: pretraining (skipped when `resume` finds a
/// checkpoint), candidate generation (likewise), then the training and
/// inference iterations with every artifact persisted under the workdir.
pub fn run(config: &PipelineConfig, resume: bool) -> Result<RunOutput> {
    config.validate()?;
    if config.backend != Backend::Tiny {
        return Err(Error::config("backend", "training requires the tiny backend"));
    }
    let products = load_products(config)?;
    let seeds = load_seed_sets(config.require("paths.seeds")?)?;
    let gold = config.optional("paths.gold")?.map(load_clusters).transpose()?;
    let wd = Workdir::new(&config.paths.workdir);
    for k in wd.iterations() {
        let dir = wd.iteration(k);
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let encoder = if resume && wd.encoder_checkpoint().exists() {
        log::info!("reusing {}", wd.encoder_checkpoint().display());
        load_encoder(wd.encoder_checkpoint())?
    } else {
        pretrain(config)?.0
    };
    let candidate_output = if resume && wd.candidates_file().exists() && wd.candidate_spans().exists() {
        log::info!("reusing {}", wd.candidates_file().display());
        CandidateOutput {
            candidates: load_candidates(wd.candidates_file())?,
            spans: load_gold_spans(wd.candidate_spans())?
                .into_iter()
                .map(|(id, s)| (id, s.iter().map(GoldSpan::span).collect()))
                .collect(),
            threshold: read_json(&wd.threshold_file())?,
        }
    } else {
        candidates(config, &products, &encoder).map_err(|e| e.in_stage("candidates", None))?
    };
    for (t, n) in candidate_output.counts() {
        log::info!("{t}: {n} candidate values");
    }

    let index = ProductIndex::new(&products);
    let seed_matches = match_seeds_to_occurrences(&seeds, &products);
    for (t, a, v) in seed_matches.unmatched() {
        log::warn!("seed `{v}` of {t}/{a} never occurs in the corpus");
    }
    let inputs = RunInputs {
        products: &index,
        seeds: &seeds,
        seed_matches: &seed_matches,
        candidates: &candidate_output.candidates,
        gold: gold.as_ref(),
        seed: config.seed,
    };
    let mut model = Model::new(encoder);
    let mut summaries = Vec::new();
    let reports = discovery::run_iterations(
        &mut model,
        &inputs,
        &config.discovery_config(),
        config.max_iter,
        |report, model| {
            let k = report.iteration;
            let persist = || -> Result<IterationSummary> {
                write_training_set(wd.trainset(k), &report.training)?;
                write_json(&wd.trainset(k).join("clusters.json"), &report.training_clusters)?;
                wd.create(&wd.checkpoint(k))?;
                save_encoder(wd.checkpoint(k).join("encoder.json"), &model.encoder)?;
                save_head(wd.checkpoint(k).join("head.json"), &model.head)?;
                discovery::write_predictions(wd.predictions(k), &report.predictions)?;
                wd.create(&wd.metrics(k))?;
                write_loss_history(wd.metrics(k).join("loss.jsonl"), &report.history)?;
                let summary = summarize(report, gold.as_ref())?;
                write_json(&wd.metrics(k).join("summary.json"), &summary)?;
                if let Some(m) = &report.metrics {
                    let mut m = m.clone();
                    if let Some(r) = summary.density_cluster_recall {
                        m.push("*", "density_cluster_recall", r, m.rows.first().map_or(0, |r| r.n_labeled));
                    }
                    m.write_csv(wd.metrics(k).join("metrics.csv"))?;
                }
                log::info!(
                    "iteration {k}: {} clusters ({} new), coverage {:.3}, change {:.3}{}",
                    summary.clusters,
                    summary.fresh_clusters,
                    summary.coverage,
                    summary.change_rate,
                    summary.ari.map(|a| format!(", ARI {a:.3}")).unwrap_or_default()
                );
                Ok(summary)
            };
            summaries.push(persist().map_err(|e| e.in_stage("persist", Some(k)))?);
            Ok(())
        },
    )
    .map_err(|e| e.in_stage("iterate", None))?;
    Ok(RunOutput {
        candidates: candidate_output,
        iterations: summaries,
        reports,
    })
}

/// Metrics of persisted predictions (`iteration`, or the last one) against
/// the gold clusters, plus candidate metrics when their inputs exist.
pub fn eval(config: &PipelineConfig, iteration: Option<usize>) -> Result<MetricsReport> {
    let gold = load_clusters(config.require("paths.gold")?)?;
    let wd = Workdir::new(&config.paths.workdir);
    let k = match iteration {
        Some(k) => k,
        None => *wd
            .iterations()
            .last()
            .ok_or_else(|| Error::Empty(format!("no iteration under {}", wd.root().display())))?,
    };
    let predicted = load_clusters(wd.predictions(k).join("clusters.json"))?;
    let assignments = predicted
        .iter()
        .map(|(t, clusters)| {
            let m = clusters
                .iter()
                .filter(|(c, _)| c.as_str() != corpus::NOISE_CLUSTER)
                .flat_map(|(c, values)| values.iter().map(move |v| (v.clone(), c.clone())))
                .collect();
            (t.clone(), m)
        })
        .collect();
    let mut report = MetricsReport::clustering(&assignments, &gold)?;

    if wd.candidates_file().exists() {
        let found = load_candidates(wd.candidates_file())?;
        for (t, attrs) in &gold {
            let gold_values: BTreeSet<String> = attrs.values().flatten().cloned().collect();
            let predicted: BTreeSet<String> = found.get(t).map(|c| c.keys().cloned().collect()).unwrap_or_default();
            if !gold_values.is_empty() {
                report.push(t, "corpus_recall", corpus_recall(&predicted, &gold_values)?, gold_values.len());
            }
        }
    }
    if let (Some(path), true) = (config.optional("paths.gold_spans")?, wd.candidate_spans().exists()) {
        let to_spans = |g: GoldSpans| -> BTreeMap<String, Vec<Span>> {
            g.into_iter()
                .map(|(id, s)| (id, s.iter().map(GoldSpan::span).collect()))
                .collect()
        };
        let gold_spans = to_spans(load_gold_spans(path)?);
        let predicted: BTreeMap<String, Vec<Span>> = to_spans(load_gold_spans(wd.candidate_spans())?)
            .into_iter()
            .filter(|(id, _)| gold_spans.contains_key(id))
            .collect();
        let prf = entity_prf(&predicted, &gold_spans)?;
        let n = gold_spans.values().map(Vec::len).sum();
        report.push("*", "entity_precision", prf.precision, n);
        report.push("*", "entity_recall", prf.recall, n);
        report.push("*", "entity_f1", prf.f1, n);
    }
    Ok(report)
}

/// Projects the candidate values of `product_type` to 2-D with the
/// encoder of the last iteration (or the pretrained one) and writes
/// `projection_<type>.tsv` into the workdir.
pub fn project(config: &PipelineConfig, product_type: &str) -> Result<(PathBuf, Vec<ProjectedValue>)> {
    config.validate()?;
    let products = load_products(config)?;
    let wd = Workdir::new(&config.paths.workdir);
    let found = load_candidates(wd.candidates_file())?;
    let set = found
        .get(product_type)
        .ok_or_else(|| Error::UnknownProductType(product_type.to_owned()))?;
    let handle = match (config.backend, wd.iterations().last()) {
        (Backend::Tiny, Some(&k)) => EncoderHandle::Tiny(load_encoder(wd.checkpoint(k).join("encoder.json"))?),
        _ => open_encoder(config)?,
    };
    let index = ProductIndex::new(&products);
    let mut rng = stage_rng(config.seed, "project", 0);
    let vectors = embed_candidates(
        handle.as_encoder(),
        &index,
        set,
        config.discovery.occurrence_cap,
        &mut rng,
    )?;
    let mut labels = BTreeMap::new();
    match config.optional("paths.gold")? {
        Some(path) => {
            if let Some(attrs) = load_clusters(path)?.get(product_type) {
                for (a, values) in attrs {
                    for v in values {
                        labels.insert(v.clone(), a.clone());
                    }
                }
            }
        }
        None => {
            if let Some(path) = config.optional("paths.seeds")? {
                if let Some(attrs) = load_seed_sets(path)?.attributes(product_type) {
                    for (a, values) in attrs {
                        for v in values {
                            labels.insert(v.clone(), a.clone());
                        }
                    }
                }
            }
        }
    }
    let rows = project_values(&vectors, &labels)?;
    let safe: String = product_type
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect();
    let path = wd.root().join(format!("projection_{safe}.tsv"));
    wd.create(wd.root())?;
    write_projection(&path, &rows)?;
    Ok((path, rows))
}

/// Shape of a generated synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub types: usize,
    pub attributes: usize,
    pub values: usize,
    pub products: usize,
    pub noise_p: f64,
    /// Share of values that end in their attribute's unit word.
    pub unit_fraction: f64,
    pub seeded_attributes: usize,
    pub seeds_per_attribute: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            types: 5,
            attributes: 4,
            values: 8,
            products: 2000,
            noise_p: 0.1,
            unit_fraction: 0.5,
            seeded_attributes: 2,
            seeds_per_attribute: 3,
            seed: 1,
        }
    }
}

/// Files written by [`write_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticFiles {
    pub corpus: PathBuf,
    pub seeds: PathBuf,
    pub gold: PathBuf,
    pub gold_spans: PathBuf,
    /// Seeded attributes per type; the others are left to discovery.
    pub seeded: BTreeMap<String, Vec<String>>,
}

impl SyntheticFiles {
    /// Points the data paths of `config` at these files.
    pub fn configure(&self, config: &mut PipelineConfig) {
        config.paths.corpus = Some(self.corpus.clone());
        config.paths.seeds = Some(self.seeds.clone());
        config.paths.gold = Some(self.gold.clone());
        config.paths.gold_spans = Some(self.gold_spans.clone());
    }
}

/// Generates a synthetic corpus with seeds for `seeded_attributes` random
/// attributes of each type and writes it, with its answers, to `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<SyntheticFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = GroundTruthSchema::random(
        spec.types,
        spec.attributes,
        spec.values,
        spec.unit_fraction,
        spec.noise_p,
        spec.seed,
    );
    let data = generate_synthetic_corpus(&schema, spec.products)?;
    let mut rng = stage_rng(spec.seed, "seeds", 0);
    let mut seeds: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    let mut seeded = BTreeMap::new();
    for (t, attrs) in &data.gold {
        let names: Vec<&String> = attrs.keys().collect();
        let mut chosen: Vec<&String> = names
            .choose_multiple(&mut rng, spec.seeded_attributes.min(names.len()))
            .copied()
            .collect();
        chosen.sort();
        for a in &chosen {
            let values: Vec<String> = attrs[*a]
                .choose_multiple(&mut rng, spec.seeds_per_attribute.min(attrs[*a].len()))
                .cloned()
                .collect();
            seeds.entry(t.clone()).or_default().insert((*a).clone(), values);
        }
        seeded.insert(t.clone(), chosen.into_iter().cloned().collect());
    }
    let files = SyntheticFiles {
        corpus: dir.join("corpus.jsonl"),
        seeds: dir.join("seeds.json"),
        gold: dir.join("gold.json"),
        gold_spans: dir.join("gold_spans.jsonl"),
        seeded,
    };
    corpus::write_corpus(&files.corpus, &data.products)?;
    write_json(&files.seeds, &seeds)?;
    corpus::write_clusters(&files.gold, &data.gold)?;
    corpus::write_gold_spans(&files.gold_spans, &data.spans)?;
    // the seed file must parse under the same rules as user input
    SeedSets::from_json(&std::fs::read_to_string(&files.seeds).map_err(|e| Error::io(&files.seeds, e))?)?;
    Ok(files)
}

/// Reloads the model persisted for iteration `k`.
pub fn load_iteration_model(config: &PipelineConfig, k: usize) -> Result<(Encoder, Head)> {
    let wd = Workdir::new(&config.paths.workdir);
    Ok((
        load_encoder(wd.checkpoint(k).join("encoder.json"))?,
        load_head(wd.checkpoint(k).join("head.json"))?,
    ))
}
