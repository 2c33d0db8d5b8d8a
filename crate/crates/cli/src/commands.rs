//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! writes its artifacts under the configured output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use evidal_core::active::{
    evaluate, run_experiment_observed, write_history_csv, ActiveLearner, DatasetOracle, QueryStrategy, RoundRecord,
    CSV_SCHEMA_VERSION,
};
use evidal_core::datagen::{
    generate_gaussian_mixture, generate_outdomain_variant, load_dataset, save_dataset, GeneratorMeta, MixtureSpec,
    PoolDataset,
};
use evidal_core::evidential::OneHotLabel;
use evidal_core::metrics::{
    accuracy, binary_auc, save_histograms, uncertainty_histograms, uncertainty_separation, weighted_f1,
    DEFAULT_HISTOGRAM_BINS,
};
use evidal_core::network::{
    init_model, load_checkpoint, predict_samples, save_checkpoint, Labeled, ModelState, Prediction, Stage,
};
use evidal_core::pipeline::{distill, finetune_evidential, pretrain_contrastive, Domain};
use evidal_core::{seed, Error};

use crate::config::{DataConfig, RunConfig};
use crate::error::CliResult;

pub const METADATA_SCHEMA_VERSION: u32 = 1;
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const QUERIED_IDS: &str = "queried_ids.jsonl";
pub const METADATA: &str = "metadata.json";
pub const RUN_CONFIG: &str = "run.toml";

pub fn load_pool(data: &DataConfig) -> CliResult<PoolDataset> {
    match &data.dataset {
        Some(path) => Ok(load_dataset(path)?),
        None => Ok(generate_gaussian_mixture(&MixtureSpec::preset(&data.preset, data.seed)?)?),
    }
}

/// Options of the `generate` subcommand beyond the preset.
#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub n: Option<usize>,
    pub overlap_factor: Option<f64>,
    pub outdomain: bool,
}

/// Writes `<preset>-seed<seed>.jsonl` (and its out-domain variant when
/// asked) into `out`; returns the written paths.
pub fn generate(preset: &str, seed_: u64, out: &Path, opts: &GenerateOptions) -> CliResult<Vec<PathBuf>> {
    let mut spec = MixtureSpec::preset(preset, seed_)?;
    if let Some(n) = opts.n {
        spec.n = n;
    }
    if let Some(o) = opts.overlap_factor {
        spec.overlap_factor = o;
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("{preset}-seed{seed_}.jsonl"));
    save_dataset(&generate_gaussian_mixture(&spec)?, &path)?;
    let mut written = vec![path];
    if opts.outdomain {
        let path = out.join(format!("{preset}-seed{seed_}-outdomain.jsonl"));
        save_dataset(&generate_outdomain_variant(&spec)?, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Unlabeled inputs for contrastive pre-training: the training pool itself
/// (in-domain) or a sibling distribution derived from its generator spec
/// (out-domain). The evaluation split is never used.
pub fn pretraining_inputs(pool: &PoolDataset, domain: Domain) -> CliResult<Vec<Vec<f64>>> {
    match domain {
        Domain::Indomain => Ok(pool.train_pool_ids().into_iter().map(|id| pool.features(id).to_vec()).collect()),
        Domain::Outdomain => {
            let spec = pool.generator.spec.as_ref().ok_or_else(|| {
                Error::Data("out-domain pre-training needs a dataset whose header records its generator spec".into())
            })?;
            Ok(generate_outdomain_variant(spec)?.samples.into_iter().map(|s| s.features).collect())
        }
    }
}

/// Freshly initialized model for run seed `seed_`, contrastively
/// pre-trained when `pretrain` is set. Returns the per-epoch pre-training
/// losses alongside.
pub fn base_model(cfg: &RunConfig, pool: &PoolDataset, seed_: u64, pretrain: bool) -> CliResult<(ModelState, Vec<f64>)> {
    let net = cfg.model.network(pool.dim, pool.num_classes, seed::derive(seed_, "model", 0));
    let mut model = init_model(&net)?;
    if !pretrain {
        return Ok((model, Vec::new()));
    }
    let inputs = pretraining_inputs(pool, cfg.pipeline.domain)?;
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let aug = cfg.pipeline.augmentation(seed::derive(seed_, "augment", 0));
    let losses = pretrain_contrastive(&mut model, &xs, &cfg.pipeline.pretrain_config(), &aug, &cfg.optimizer)?;
    Ok((model, losses))
}

pub fn pretrain(cfg: &RunConfig, seed_: u64) -> CliResult<PathBuf> {
    let out = cfg.out_dir()?;
    let pool = load_pool(&cfg.data)?;
    let (model, losses) = base_model(cfg, &pool, seed_, true)?;
    fs::create_dir_all(out)?;
    let path = out.join("pretrained.json");
    save_checkpoint(&model, Stage::Pretrained, &path)?;
    fs::write(out.join("pretrain_losses.json"), serde_json::to_string_pretty(&losses)?)?;
    Ok(path)
}

/// Evaluation-split summary of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
    /// Binary tasks only: AUC of the expected probability of class 1.
    pub auc: Option<f64>,
}

impl EvalMetrics {
    pub fn of(preds: &[Prediction]) -> CliResult<Self> {
        let sep = uncertainty_separation(preds)?;
        let auc = if preds.first().is_some_and(|p| p.opinion.expected_prob.len() == 2) {
            let scores: Vec<f64> = preds.iter().map(|p| p.opinion.expected_prob[1]).collect();
            let truth: Vec<bool> = preds.iter().map(|p| p.true_label == Some(1)).collect();
            binary_auc(&scores, &truth).ok()
        } else {
            None
        };
        Ok(Self {
            accuracy: accuracy(preds)?,
            weighted_f1: weighted_f1(preds)?,
            mean_u_correct: sep.mean_u_correct,
            mean_u_incorrect: sep.mean_u_incorrect,
            auc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub seed: u64,
    pub teacher: EvalMetrics,
    pub student: Option<EvalMetrics>,
}

/// Fine-tunes on every training-pool label, evaluates, and optionally
/// distills a fresh student from the result.
pub fn finetune(cfg: &RunConfig, init: Option<&Path>, seed_: u64) -> CliResult<FinetuneReport> {
    let out = cfg.out_dir()?;
    let pool = load_pool(&cfg.data)?;
    let mut model = match init {
        Some(path) => {
            let (m, _) = load_checkpoint(path)?;
            if m.config().input_dim != pool.dim || m.config().num_classes != pool.num_classes {
                return Err(Error::Dimension { expected: pool.dim, got: m.config().input_dim }.into());
            }
            m
        }
        None => base_model(cfg, &pool, seed_, cfg.pipeline.pretrain)?.0,
    };
    model.reset_optimizer();
    let ids = pool.train_pool_ids();
    let labeled: Vec<Labeled> = ids
        .iter()
        .map(|&id| {
            let label = pool.sample(id).label.ok_or_else(|| Error::Data(format!("sample {id} has no label")))?;
            Ok((pool.features(id), OneHotLabel::new(label, pool.num_classes)?))
        })
        .collect::<CliResult<_>>()?;
    let mut rng = seed::rng(seed_, "finetune_full", 0);
    finetune_evidential(&mut model, &labeled, cfg.finetune.epochs, 1, &cfg.optimizer, &mut rng)?;

    fs::create_dir_all(out)?;
    save_checkpoint(&model, Stage::Finetuned, &out.join("finetuned.json"))?;
    let preds = evaluate(&model, &pool)?;
    save_histograms(&uncertainty_histograms(&preds, DEFAULT_HISTOGRAM_BINS)?, &out.join("histogram.json"))?;
    let teacher = EvalMetrics::of(&preds)?;

    let student = if cfg.finetune.distill_epochs > 0 {
        let net = cfg.model.network(pool.dim, pool.num_classes, seed::derive(seed_, "student", 0));
        let mut student = init_model(&net)?;
        let xs: Vec<&[f64]> = ids.iter().map(|&id| pool.features(id)).collect();
        let mut rng = seed::rng(seed_, "distill", 0);
        distill(&model, &mut student, &xs, cfg.finetune.distill_epochs, &cfg.optimizer, &mut rng)?;
        save_checkpoint(&student, Stage::Distilled, &out.join("distilled.json"))?;
        Some(EvalMetrics::of(&evaluate(&student, &pool)?)?)
    } else {
        None
    };
    let report = FinetuneReport { seed: seed_, teacher, student };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub num_classes: usize,
    pub dim: usize,
    pub pool_size: usize,
    pub eval_size: usize,
    pub generator: GeneratorMeta,
}

/// Defaults the run depends on, spelled out for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub evidence_activation: String,
    pub optimizer: String,
    pub anneal_mode: String,
    pub warm_start: bool,
    pub pretrain: bool,
    pub pretrain_domain: String,
    pub quota_rule: String,
    pub topk_tie_break: String,
    pub seed_derivation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub csv_schema_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    pub total_rounds: usize,
    pub decisions: Decisions,
}

fn label(v: impl Serialize) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Result of one (strategy, seed) job.
#[derive(Debug)]
pub struct JobResult {
    pub strategy: QueryStrategy,
    pub seed: u64,
    pub learner: ActiveLearner,
}

#[derive(Debug)]
pub struct AlRunOutput {
    pub dir: PathBuf,
    pub jobs: Vec<JobResult>,
}

impl AlRunOutput {
    pub fn records(&self) -> impl Iterator<Item = &RoundRecord> {
        self.jobs.iter().flat_map(|j| j.learner.history())
    }
}

#[derive(Serialize)]
struct QueriedLine<'a> {
    strategy: QueryStrategy,
    seed: u64,
    round: usize,
    queried_ids: &'a [usize],
}

/// Runs every (strategy, seed) pair in parallel and writes the round CSV,
/// the queried-id sidecar, final histograms and checkpoints, the resolved
/// config and the run metadata. Output bytes depend only on the config.
pub fn al_run(cfg: &RunConfig, progress: bool) -> CliResult<AlRunOutput> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let pool = load_pool(&cfg.data)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("histograms"))?;

    let bases: Vec<ModelState> = cfg
        .active
        .seeds
        .par_iter()
        .map(|&s| {
            let (model, _) = base_model(cfg, &pool, s, cfg.pipeline.pretrain)?;
            if cfg.pipeline.pretrain {
                save_checkpoint(&model, Stage::Pretrained, &out.join(format!("checkpoints/pretrained-seed{s}.json")))?;
            }
            Ok(model)
        })
        .collect::<CliResult<_>>()?;

    let pairs: Vec<(QueryStrategy, usize)> =
        cfg.active.strategies.iter().flat_map(|&st| (0..cfg.active.seeds.len()).map(move |i| (st, i))).collect();
    let jobs: Vec<JobResult> = pairs
        .par_iter()
        .map(|&(strategy, i)| {
            let seed_ = cfg.active.seeds[i];
            let learner = run_experiment_observed(
                &cfg.al_config(strategy, seed_),
                &pool,
                bases[i].clone(),
                &mut DatasetOracle,
                |obs| {
                    if progress {
                        let r = obs.record;
                        eprintln!(
                            "{strategy} seed {seed_} round {} labels {:.3} accuracy {:.4}",
                            r.round, r.labels_fraction, r.accuracy
                        );
                    }
                },
            )?;
            Ok(JobResult { strategy, seed: seed_, learner })
        })
        .collect::<CliResult<_>>()?;

    let mut csv = BufWriter::new(File::create(out.join(ROUNDS_CSV))?);
    let all: Vec<RoundRecord> = jobs.iter().flat_map(|j| j.learner.history().iter().cloned()).collect();
    write_history_csv(&mut csv, &all)?;
    csv.flush()?;

    let mut sidecar = BufWriter::new(File::create(out.join(QUERIED_IDS))?);
    for r in &all {
        let line = QueriedLine { strategy: r.strategy, seed: r.seed, round: r.round, queried_ids: &r.queried_ids };
        writeln!(sidecar, "{}", serde_json::to_string(&line)?)?;
    }
    sidecar.flush()?;

    for j in &jobs {
        let stem = format!("{}-seed{}", j.strategy, j.seed);
        let hist = uncertainty_histograms(j.learner.last_eval_predictions(), DEFAULT_HISTOGRAM_BINS)?;
        save_histograms(&hist, &out.join(format!("histograms/{stem}.json")))?;
        save_checkpoint(j.learner.model(), Stage::Finetuned, &out.join(format!("checkpoints/{stem}.json")))?;
    }

    let meta = RunMetadata {
        schema_version: METADATA_SCHEMA_VERSION,
        csv_schema_version: CSV_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        dataset: DatasetInfo {
            source: cfg.data.dataset.as_ref().map_or_else(
                || format!("preset {} seed {}", cfg.data.preset, cfg.data.seed),
                |p| p.display().to_string(),
            ),
            num_classes: pool.num_classes,
            dim: pool.dim,
            pool_size: pool.train_pool_ids().len(),
            eval_size: pool.eval_ids().len(),
            generator: pool.generator.clone(),
        },
        total_rounds: cfg.al_config(cfg.active.strategies[0], 0).total_rounds(),
        decisions: Decisions {
            evidence_activation: label(cfg.model.evidence_activation),
            optimizer: format!(
                "adam lr={} betas=({}, {}) eps={} batch={}",
                cfg.optimizer.learning_rate,
                cfg.optimizer.beta1,
                cfg.optimizer.beta2,
                cfg.optimizer.epsilon,
                cfg.optimizer.batch_size
            ),
            anneal_mode: label(cfg.active.anneal_mode),
            warm_start: cfg.active.warm_start,
            pretrain: cfg.pipeline.pretrain,
            pretrain_domain: label(cfg.pipeline.domain),
            quota_rule: "labeled after round r = min(ceil(r * q * N_pool), N_pool)".into(),
            topk_tie_break: "descending uncertainty, then ascending sample id".into(),
            seed_derivation: "per-purpose ChaCha8 streams derived from the run seed".into(),
        },
    };
    fs::write(out.join(METADATA), serde_json::to_string_pretty(&meta)? + "\n")?;
    fs::write(out.join(RUN_CONFIG), cfg.to_toml()?)?;
    Ok(AlRunOutput { dir: out, jobs })
}

/// One line per sample: id, true label, predicted class, uncertainty and
/// the embedding coordinates.
pub fn export_embeddings(checkpoint: &Path, dataset: &Path, out: &Path) -> CliResult<usize> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let pool = load_dataset(dataset)?;
    let rows: Vec<(Prediction, Vec<f64>)> = pool
        .samples
        .par_iter()
        .map(|s| {
            let trace = model.trace(&s.features)?;
            let pred = predict_samples(&model, &[(s.id, s.features.as_slice(), s.label)])?.remove(0);
            Ok((pred, trace.embedding().to_vec()))
        })
        .collect::<CliResult<_>>()?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    let dims: Vec<String> = (0..model.config().embedding_dim).map(|i| format!("emb_{i}")).collect();
    writeln!(w, "id,true_label,predicted_class,uncertainty,{}", dims.join(","))?;
    for (p, emb) in &rows {
        let truth = p.true_label.map(|t| t.to_string()).unwrap_or_default();
        let emb: Vec<String> = emb.iter().map(f64::to_string).collect();
        writeln!(w, "{},{truth},{},{},{}", p.sample_id, p.predicted_class, p.uncertainty(), emb.join(","))?;
    }
    w.flush()?;
    Ok(rows.len())
}
