//! Pool-based active learning driven by evidential uncertainty.
//!
//! A run labels a random seed set, then alternates query, annotation,
//! fine-tuning and evaluation until the label budget is spent. The
//! controller exposes the steps individually ([`ActiveLearner::pending_query`]
//! and [`ActiveLearner::complete_round`]) so that an external annotator can
//! supply labels between them; [`ActiveLearner::run_round`] chains the steps
//! with a synchronous [`LabelOracle`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datagen::{PoolDataset, Split};
use crate::error::{Error, Result};
use crate::evidential::OneHotLabel;
use crate::metrics::{accuracy, uncertainty_separation, weighted_f1};
use crate::network::{predict_samples, Labeled, ModelState, Prediction, TrainHyper};
use crate::pipeline::finetune_evidential;
use crate::seed;

/// Slack for float schedule arithmetic such as `3 * 0.01 * 8000`.
const SCHEDULE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    UncertaintyTopk,
    Random,
}

impl QueryStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UncertaintyTopk => "uncertainty_topk",
            Self::Random => "random",
        }
    }
}

impl std::fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty_topk" => Ok(Self::UncertaintyTopk),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// How the annealing index behaves across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealMode {
    /// Every round's fine-tune starts again at `t = 1`.
    Reset,
    /// The index keeps counting across rounds.
    Continue,
}

/// Where annotations come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OracleBinding {
    DatasetLabels,
    Interactive { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub budget_fraction_per_round: f64,
    pub max_budget_fraction: f64,
    pub strategy: QueryStrategy,
    pub epochs_per_round: u32,
    pub hyper: TrainHyper,
    /// Fine-tune from the previous round's model instead of the base model.
    pub warm_start: bool,
    pub anneal_mode: AnnealMode,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            budget_fraction_per_round: 0.01,
            max_budget_fraction: 0.10,
            strategy: QueryStrategy::UncertaintyTopk,
            epochs_per_round: 30,
            hyper: TrainHyper::default(),
            warm_start: true,
            anneal_mode: AnnealMode::Reset,
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.budget_fraction_per_round;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("budget fraction per round must be in (0, 1], got {q}")));
        }
        let m = self.max_budget_fraction;
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::Config(format!("max budget fraction must be in (0, 1], got {m}")));
        }
        if self.hyper.batch_size == 0 || !(self.hyper.learning_rate >= 0.0) {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        Ok(())
    }

    /// Number of rounds, the seed round included.
    pub fn total_rounds(&self) -> usize {
        ((self.max_budget_fraction / self.budget_fraction_per_round) - SCHEDULE_EPS).ceil().max(1.0) as usize
    }

    /// Labeled-set size after `round` rounds: `min(ceil(round * q * N), N)`.
    pub fn target_labels(&self, round: usize, pool_size: usize) -> usize {
        let t = (round as f64 * self.budget_fraction_per_round * pool_size as f64 - SCHEDULE_EPS).ceil().max(0.0);
        (t as usize).min(pool_size)
    }
}

/// Metrics of one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labels_used: usize,
    pub labels_fraction: f64,
    pub strategy: QueryStrategy,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
    pub queried_ids: Vec<usize>,
    /// Seconds spent fine-tuning and evaluating; not part of the CSV.
    pub wall_time: f64,
}

/// Bookkeeping of a run; mutated only by [`ActiveLearner`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    /// Number of completed rounds; the seed round is round 1.
    pub round: usize,
    pub labeled_ids: Vec<usize>,
    /// Annotations received, by sample id.
    pub annotations: BTreeMap<usize, usize>,
    pub pool_size: usize,
    pub history: Vec<RoundRecord>,
    /// Epochs fine-tuned so far, for [`AnnealMode::Continue`].
    pub epochs_trained: u32,
}

impl ALState {
    pub fn labels_fraction(&self) -> f64 {
        if self.pool_size == 0 {
            0.0
        } else {
            self.labeled_ids.len() as f64 / self.pool_size as f64
        }
    }

    pub fn is_labeled(&self, id: usize) -> bool {
        self.annotations.contains_key(&id)
    }
}

/// Ids chosen for annotation plus the uncertainty of every unlabeled
/// candidate at query time (empty for the seed round).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub ids: Vec<usize>,
    pub candidate_uncertainty: Vec<(usize, f64)>,
}

/// Source of labels for queried ids.
pub trait LabelOracle {
    fn annotate(&mut self, pool: &PoolDataset, ids: &[usize]) -> Result<Vec<usize>>;
}

/// Answers with the ground truth stored in the dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetOracle;

impl LabelOracle for DatasetOracle {
    fn annotate(&mut self, pool: &PoolDataset, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                pool.samples
                    .get(id)
                    .and_then(|s| s.label)
                    .ok_or_else(|| Error::Oracle(format!("no ground truth for sample {id}")))
            })
            .collect()
    }
}

/// Uniformly random seed set of `ceil(q * N)` pool ids, sorted ascending.
pub fn seed_selection(config: &ALConfig, pool: &PoolDataset) -> Result<Vec<usize>> {
    config.validate()?;
    let candidates = pool.train_pool_ids();
    if candidates.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let k = config.target_labels(1, candidates.len());
    let mut rng = seed::rng(config.seed, "seed_round", 0);
    let mut ids: Vec<usize> = index::sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    ids.sort_unstable();
    Ok(ids)
}

fn unlabeled_pool(state: &ALState, pool: &PoolDataset) -> Vec<usize> {
    pool.samples.iter().filter(|s| s.split == Split::TrainPool && !state.is_labeled(s.id)).map(|s| s.id).collect()
}

/// Chooses `k` unlabeled pool ids. Top-k returns the largest uncertainties
/// ordered by `(u descending, id ascending)`; random draws uniformly
/// without replacement from a stream keyed by the round index.
pub fn query(
    state: &ALState,
    model: &ModelState,
    pool: &PoolDataset,
    strategy: QueryStrategy,
    k: usize,
    seed_: u64,
) -> Result<QueryResult> {
    let unlabeled = unlabeled_pool(state, pool);
    if k > unlabeled.len() {
        return Err(Error::Budget(format!("query of {k} exceeds {} unlabeled samples", unlabeled.len())));
    }
    match strategy {
        QueryStrategy::UncertaintyTopk => {
            let inputs: Vec<(usize, &[f64], Option<usize>)> =
                unlabeled.iter().map(|&id| (id, pool.features(id), None)).collect();
            let preds = predict_samples(model, &inputs)?;
            let mut scored: Vec<(usize, f64)> = preds.iter().map(|p| (p.sample_id, p.uncertainty())).collect();
            let mut ranked = scored.clone();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.sort_by_key(|s| s.0);
            Ok(QueryResult { ids: ranked[..k].iter().map(|s| s.0).collect(), candidate_uncertainty: scored })
        }
        QueryStrategy::Random => {
            let mut rng = seed::rng(seed_, "query", state.round as u64);
            let ids = index::sample(&mut rng, unlabeled.len(), k).into_iter().map(|i| unlabeled[i]).collect();
            Ok(QueryResult { ids, candidate_uncertainty: Vec::new() })
        }
    }
}

/// The active-learning state machine for one run.
#[derive(Debug, Clone)]
pub struct ActiveLearner {
    config: ALConfig,
    state: ALState,
    base_model: ModelState,
    model: ModelState,
    last_eval: Vec<Prediction>,
}

impl ActiveLearner {
    pub fn new(config: ALConfig, pool: &PoolDataset, base_model: ModelState) -> Result<Self> {
        config.validate()?;
        if base_model.config().input_dim != pool.dim {
            return Err(Error::Dimension { expected: pool.dim, got: base_model.config().input_dim });
        }
        if base_model.config().num_classes != pool.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, pool has {}",
                base_model.config().num_classes,
                pool.num_classes
            )));
        }
        let pool_size = pool.train_pool_ids().len();
        if pool_size == 0 {
            return Err(Error::Empty("training pool"));
        }
        if pool.eval_ids().is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        Ok(Self {
            config,
            state: ALState {
                round: 0,
                labeled_ids: Vec::new(),
                annotations: BTreeMap::new(),
                pool_size,
                history: Vec::new(),
                epochs_trained: 0,
            },
            model: base_model.clone(),
            base_model,
            last_eval: Vec::new(),
        })
    }

    pub fn config(&self) -> &ALConfig {
        &self.config
    }

    pub fn state(&self) -> &ALState {
        &self.state
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.state.history
    }

    /// Evaluation-split predictions of the latest round.
    pub fn last_eval_predictions(&self) -> &[Prediction] {
        &self.last_eval
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.total_rounds() || self.state.labeled_ids.len() >= self.state.pool_size
    }

    /// Labels the next round asks for.
    pub fn next_quota(&self) -> usize {
        let r = self.state.round;
        self.config.target_labels(r + 1, self.state.pool_size) - self.config.target_labels(r, self.state.pool_size)
    }

    /// Ids the next round needs annotated: the random seed set for round
    /// 0, otherwise the strategy's query under the current model.
    pub fn pending_query(&self, pool: &PoolDataset) -> Result<QueryResult> {
        if self.is_finished() {
            return Err(Error::Budget("label budget exhausted".into()));
        }
        if self.state.round == 0 {
            return Ok(QueryResult { ids: seed_selection(&self.config, pool)?, candidate_uncertainty: Vec::new() });
        }
        query(&self.state, &self.model, pool, self.config.strategy, self.next_quota(), self.config.seed)
    }

    /// Records `labels` for `ids`, fine-tunes on the whole labeled set,
    /// evaluates on the eval split and appends the round record. On error
    /// the state is left unchanged.
    pub fn complete_round(&mut self, pool: &PoolDataset, ids: &[usize], labels: &[usize]) -> Result<&RoundRecord> {
        if self.is_finished() {
            return Err(Error::Budget("label budget exhausted".into()));
        }
        if ids.len() != labels.len() {
            return Err(Error::Dimension { expected: ids.len(), got: labels.len() });
        }
        if ids.len() != self.next_quota() {
            return Err(Error::Budget(format!("round needs {} labels, got {}", self.next_quota(), ids.len())));
        }
        let mut fresh = BTreeSet::new();
        for (&id, &label) in ids.iter().zip(labels) {
            let ok = pool.samples.get(id).is_some_and(|s| s.split == Split::TrainPool);
            if !ok {
                return Err(Error::Budget(format!("sample {id} is not in the training pool")));
            }
            if self.state.is_labeled(id) || !fresh.insert(id) {
                return Err(Error::Budget(format!("sample {id} is already labeled")));
            }
            if label >= pool.num_classes {
                return Err(Error::Oracle(format!("label {label} outside [0, {})", pool.num_classes)));
            }
        }

        let started = Instant::now();
        let mut state = self.state.clone();
        for (&id, &label) in ids.iter().zip(labels) {
            state.labeled_ids.push(id);
            state.annotations.insert(id, label);
        }
        let round_index = state.round;

        let mut model = if self.config.warm_start { self.model.clone() } else { self.base_model.clone() };
        model.reset_optimizer();
        let k = pool.num_classes;
        let training: Vec<Labeled> = state
            .labeled_ids
            .iter()
            .map(|&id| Ok((pool.features(id), OneHotLabel::new(state.annotations[&id], k)?)))
            .collect::<Result<_>>()?;
        let start_t = match self.config.anneal_mode {
            AnnealMode::Reset => 1,
            AnnealMode::Continue => state.epochs_trained + 1,
        };
        let mut rng = seed::rng(self.config.seed, "finetune", round_index as u64);
        finetune_evidential(&mut model, &training, self.config.epochs_per_round, start_t, &self.config.hyper, &mut rng)?;
        state.epochs_trained += self.config.epochs_per_round;

        let eval = evaluate(&model, pool)?;
        let sep = uncertainty_separation(&eval)?;
        state.round += 1;
        state.history.push(RoundRecord {
            round: state.round,
            labels_used: state.labeled_ids.len(),
            labels_fraction: state.labels_fraction(),
            strategy: self.config.strategy,
            seed: self.config.seed,
            accuracy: accuracy(&eval)?,
            weighted_f1: weighted_f1(&eval)?,
            mean_u_correct: sep.mean_u_correct,
            mean_u_incorrect: sep.mean_u_incorrect,
            queried_ids: ids.to_vec(),
            wall_time: started.elapsed().as_secs_f64(),
        });
        self.state = state;
        self.model = model;
        self.last_eval = eval;
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Query, annotate through `oracle`, then [`Self::complete_round`].
    pub fn run_round(&mut self, pool: &PoolDataset, oracle: &mut dyn LabelOracle) -> Result<&RoundRecord> {
        let q = self.pending_query(pool)?;
        let labels = oracle.annotate(pool, &q.ids)?;
        self.complete_round(pool, &q.ids, &labels)
    }

    /// Hands back the trained model, consuming the learner.
    pub fn into_model(self) -> ModelState {
        self.model
    }
}

/// Predictions with ground truth on the evaluation split.
pub fn evaluate(model: &ModelState, pool: &PoolDataset) -> Result<Vec<Prediction>> {
    let inputs: Vec<(usize, &[f64], Option<usize>)> =
        pool.samples.iter().filter(|s| s.split == Split::Eval).map(|s| (s.id, s.features.as_slice(), s.label)).collect();
    if inputs.iter().any(|i| i.2.is_none()) {
        return Err(Error::Data("evaluation samples need ground-truth labels".into()));
    }
    predict_samples(model, &inputs)
}

/// What the observer of [`run_experiment_observed`] sees for each round.
#[derive(Debug)]
pub struct RoundObservation<'a> {
    pub state_before: &'a ALState,
    pub query: &'a QueryResult,
    pub record: &'a RoundRecord,
}

/// Runs a whole experiment with `oracle`, calling `observer` after every
/// round.
pub fn run_experiment_observed(
    config: &ALConfig,
    pool: &PoolDataset,
    base_model: ModelState,
    oracle: &mut dyn LabelOracle,
    mut observer: impl FnMut(&RoundObservation<'_>),
) -> Result<ActiveLearner> {
    let mut learner = ActiveLearner::new(config.clone(), pool, base_model)?;
    while !learner.is_finished() {
        let before = learner.state.clone();
        let q = learner.pending_query(pool)?;
        let labels = oracle.annotate(pool, &q.ids)?;
        let record = learner.complete_round(pool, &q.ids, &labels)?.clone();
        observer(&RoundObservation { state_before: &before, query: &q, record: &record });
    }
    Ok(learner)
}

/// Seed round plus query rounds until the budget is spent.
pub fn run_experiment(
    config: &ALConfig,
    pool: &PoolDataset,
    base_model: ModelState,
    oracle: &mut dyn LabelOracle,
) -> Result<Vec<RoundRecord>> {
    Ok(run_experiment_observed(config, pool, base_model, oracle, |_| {})?.state.history)
}

pub const CSV_HEADER: &str = "round,labels_fraction,strategy,seed,accuracy,weighted_f1,mean_u_correct,mean_u_incorrect";
pub const CSV_SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row; floats use the shortest representation that round-trips.
pub fn csv_row(r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.round,
        r.labels_fraction,
        r.strategy,
        r.seed,
        r.accuracy,
        r.weighted_f1,
        opt(r.mean_u_correct),
        opt(r.mean_u_incorrect)
    )
}

pub fn write_history_csv<W: Write>(mut w: W, records: &[RoundRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", csv_row(r))?;
    }
    Ok(())
}

/// A parsed CSV row; mirrors the CSV columns of [`RoundRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub labels_fraction: f64,
    pub strategy: QueryStrategy,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
}

pub fn read_history_csv<R: BufRead>(r: R) -> Result<Vec<CsvRow>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })??;
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Parse { line: 1, message: format!("unexpected header `{header}`") });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { line: lineno, message: m };
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 8 {
            return Err(err(format!("expected 8 columns, got {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(CsvRow {
            round: cols[0].parse().map_err(|e| err(format!("round: {e}")))?,
            labels_fraction: num(cols[1])?,
            strategy: cols[2].parse().map_err(|e: Error| err(e.to_string()))?,
            seed: cols[3].parse().map_err(|e| err(format!("seed: {e}")))?,
            accuracy: num(cols[4])?,
            weighted_f1: num(cols[5])?,
            mean_u_correct: opt_num(cols[6])?,
            mean_u_incorrect: opt_num(cols[7])?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSummary {
    pub strategy: QueryStrategy,
    pub round: usize,
    pub labels_fraction: f64,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
}

/// Per-strategy, per-round aggregate over seeds, ordered by strategy then
/// round.
pub fn summarize(rows: &[CsvRow]) -> Vec<FractionSummary> {
    let mut groups: BTreeMap<(QueryStrategy, usize), Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.strategy, r.round)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((strategy, round), rs)| FractionSummary {
            strategy,
            round,
            labels_fraction: rs.iter().map(|r| r.labels_fraction).sum::<f64>() / rs.len() as f64,
            accuracy: MeanStd::of(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
            weighted_f1: MeanStd::of(&rs.iter().map(|r| r.weighted_f1).collect::<Vec<_>>()),
        })
        .collect()
}

impl From<&RoundRecord> for CsvRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            labels_fraction: r.labels_fraction,
            strategy: r.strategy,
            seed: r.seed,
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            mean_u_correct: r.mean_u_correct,
            mean_u_incorrect: r.mean_u_incorrect,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_gaussian_mixture, MixtureSpec, Sample};
    use crate::network::{init_model, EvidenceActivation, NetworkConfig};

    fn tiny_pool(n: usize) -> PoolDataset {
        let spec = MixtureSpec { n, num_classes: 5, dim: 4, overlap_factor: 5.0, ..MixtureSpec::nct_toy(1) };
        generate_gaussian_mixture(&spec).unwrap()
    }

    fn tiny_model(pool: &PoolDataset) -> ModelState {
        init_model(&NetworkConfig {
            input_dim: pool.dim,
            hidden_dims: vec![8],
            embedding_dim: 4,
            projection_dim: 4,
            num_classes: pool.num_classes,
            evidence_activation: EvidenceActivation::Softplus,
            seed: 3,
        })
        .unwrap()
    }

    fn fast_config(seed_: u64) -> ALConfig {
        ALConfig { epochs_per_round: 2, seed: seed_, ..ALConfig::default() }
    }

    #[test]
    fn schedule_arithmetic() {
        let c = ALConfig::default();
        assert_eq!(c.total_rounds(), 10);
        assert_eq!(c.target_labels(1, 1000), 10);
        assert_eq!(c.target_labels(3, 8000), 240);
        assert_eq!(c.target_labels(10, 8000), 800);
        assert_eq!(c.target_labels(1, 150), 2);
        let all = ALConfig { budget_fraction_per_round: 1.0, ..c };
        assert_eq!(all.target_labels(1, 37), 37);
        assert!(ALConfig { budget_fraction_per_round: 0.0, ..ALConfig::default() }.validate().is_err());
    }

    #[test]
    fn seed_round_size_and_determinism() {
        // a 1000-sample training pool
        let pool = tiny_pool(1250);
        assert_eq!(pool.train_pool_ids().len(), 1000);
        let a = seed_selection(&fast_config(4), &pool).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, seed_selection(&fast_config(4), &pool).unwrap());
        assert_ne!(a, seed_selection(&fast_config(5), &pool).unwrap());
        assert!(a.iter().all(|&id| pool.sample(id).split == Split::TrainPool));

        let full = ALConfig { budget_fraction_per_round: 1.0, ..fast_config(4) };
        assert_eq!(seed_selection(&full, &pool).unwrap().len(), 1000);
    }

    /// A pool whose model uncertainty is fixed by a stub: the features'
    /// first coordinate is the desired uncertainty rank.
    fn uncertainty_stub_pool(us: &[f64]) -> (PoolDataset, ModelState) {
        let samples = us
            .iter()
            .enumerate()
            .map(|(i, &u)| Sample { id: i, split: Split::TrainPool, label: Some(0), features: vec![u] })
            .chain(std::iter::once(Sample { id: us.len(), split: Split::Eval, label: Some(0), features: vec![0.0] }))
            .collect();
        let pool = PoolDataset {
            num_classes: 2,
            dim: 1,
            generator: crate::datagen::GeneratorMeta { kind: "stub".into(), seed: 0, spec: None },
            samples,
        };
        // identity-ish network: evidence = relu(-(x) * c + b) so larger x -> less evidence -> higher u
        let mut model = init_model(&NetworkConfig {
            input_dim: 1,
            hidden_dims: vec![],
            embedding_dim: 1,
            projection_dim: 1,
            num_classes: 2,
            evidence_activation: EvidenceActivation::Relu,
            seed: 0,
        })
        .unwrap();
        let mut p = vec![0.0; model.num_params()];
        // encoder: emb = x ; head: e_k = relu(-10 * emb + 10)
        p[0] = 1.0;
        p[2] = -10.0;
        p[3] = -10.0;
        p[4] = 10.0;
        p[5] = 10.0;
        model.set_params(p).unwrap();
        (pool, model)
    }

    fn empty_state(n: usize) -> ALState {
        ALState { round: 1, labeled_ids: vec![], annotations: BTreeMap::new(), pool_size: n, history: vec![], epochs_trained: 0 }
    }

    #[test]
    fn topk_query_orders_by_uncertainty() {
        let (pool, model) = uncertainty_stub_pool(&[0.9, 0.1, 0.5, 0.7, 0.3]);
        let q = query(&empty_state(5), &model, &pool, QueryStrategy::UncertaintyTopk, 2, 0).unwrap();
        assert_eq!(q.ids, vec![0, 3]);
        assert_eq!(q.candidate_uncertainty.len(), 5);

        let (pool, model) = uncertainty_stub_pool(&[0.4; 5]);
        let q = query(&empty_state(5), &model, &pool, QueryStrategy::UncertaintyTopk, 3, 0).unwrap();
        assert_eq!(q.ids, vec![0, 1, 2]);

        let mut st = empty_state(5);
        st.annotations.insert(0, 0);
        st.labeled_ids.push(0);
        let (pool, model) = uncertainty_stub_pool(&[0.9, 0.1, 0.5, 0.7, 0.3]);
        let q = query(&st, &model, &pool, QueryStrategy::UncertaintyTopk, 2, 0).unwrap();
        assert_eq!(q.ids, vec![3, 2]);
        assert!(query(&st, &model, &pool, QueryStrategy::UncertaintyTopk, 5, 0).is_err());
    }

    #[test]
    fn random_query_is_reproducible_and_excludes_labeled() {
        let (pool, model) = uncertainty_stub_pool(&[0.5; 40]);
        let mut st = empty_state(40);
        for id in [1, 5, 9, 22] {
            st.annotations.insert(id, 0);
            st.labeled_ids.push(id);
        }
        let a = query(&st, &model, &pool, QueryStrategy::Random, 10, 7).unwrap();
        let b = query(&st, &model, &pool, QueryStrategy::Random, 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.iter().all(|id| !st.is_labeled(*id)));
        assert_eq!(a.ids.iter().collect::<BTreeSet<_>>().len(), 10);
    }

    #[test]
    fn experiment_bookkeeping() {
        let pool = tiny_pool(1250);
        let model = tiny_model(&pool);
        let mut seen = BTreeSet::new();
        let mut prev: Option<Vec<usize>> = None;
        let learner = run_experiment_observed(&fast_config(2), &pool, model, &mut DatasetOracle, |obs| {
            for id in &obs.query.ids {
                assert!(seen.insert(*id), "id {id} annotated twice");
                assert!(!obs.state_before.is_labeled(*id));
            }
            if let Some(p) = &prev {
                assert_eq!(&obs.state_before.labeled_ids, p);
            }
            let mut after = obs.state_before.labeled_ids.clone();
            after.extend(&obs.query.ids);
            prev = Some(after);
        })
        .unwrap();
        let h = learner.history();
        assert_eq!(h.len(), 10);
        for (r, rec) in h.iter().enumerate() {
            assert_eq!(rec.round, r + 1);
            assert_eq!(rec.labels_used, 10 * (r + 1));
            assert!((rec.labels_fraction - 0.01 * (r + 1) as f64).abs() < 1e-12);
        }
        // annotations equal ground truth under the dataset oracle
        for (&id, &label) in &learner.state().annotations {
            assert_eq!(pool.sample(id).label, Some(label));
        }
        let mut finished = learner.clone();
        assert!(matches!(finished.run_round(&pool, &mut DatasetOracle), Err(Error::Budget(_))));
    }

    #[test]
    fn strategies_share_the_seed_round() {
        let pool = tiny_pool(600);
        let top = ALConfig { max_budget_fraction: 0.02, ..fast_config(9) };
        let rnd = ALConfig { strategy: QueryStrategy::Random, ..top.clone() };
        let a = run_experiment(&top, &pool, tiny_model(&pool), &mut DatasetOracle).unwrap();
        let b = run_experiment(&rnd, &pool, tiny_model(&pool), &mut DatasetOracle).unwrap();
        assert_eq!(a[0].queried_ids, b[0].queried_ids);
        assert_eq!(a[0].accuracy, b[0].accuracy);
    }

    struct Refusing;

    impl LabelOracle for Refusing {
        fn annotate(&mut self, _: &PoolDataset, _: &[usize]) -> Result<Vec<usize>> {
            Err(Error::Oracle("annotator went home".into()))
        }
    }

    #[test]
    fn oracle_failure_leaves_state_unchanged() {
        let pool = tiny_pool(400);
        let mut learner = ActiveLearner::new(fast_config(1), &pool, tiny_model(&pool)).unwrap();
        learner.run_round(&pool, &mut DatasetOracle).unwrap();
        let before = learner.state().clone();
        assert!(matches!(learner.run_round(&pool, &mut Refusing), Err(Error::Oracle(_))));
        assert_eq!(learner.state(), &before);
    }

    #[test]
    fn complete_round_rejects_bad_submissions() {
        let pool = tiny_pool(400);
        let mut learner = ActiveLearner::new(fast_config(1), &pool, tiny_model(&pool)).unwrap();
        let q = learner.pending_query(&pool).unwrap();
        let labels = DatasetOracle.annotate(&pool, &q.ids).unwrap();
        assert!(learner.complete_round(&pool, &q.ids[1..], &labels[1..]).is_err());
        let mut dup = q.ids.clone();
        dup[1] = dup[0];
        assert!(learner.complete_round(&pool, &dup, &labels).is_err());
        let eval_id = pool.eval_ids()[0];
        let mut with_eval = q.ids.clone();
        with_eval[0] = eval_id;
        assert!(learner.complete_round(&pool, &with_eval, &labels).is_err());
        assert_eq!(learner.state().round, 0);
        learner.complete_round(&pool, &q.ids, &labels).unwrap();
        assert_eq!(learner.state().round, 1);
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let pool = tiny_pool(400);
        let cfg = ALConfig { max_budget_fraction: 0.03, ..fast_config(1) };
        let h = run_experiment(&cfg, &pool, tiny_model(&pool), &mut DatasetOracle).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let rows = read_history_csv(&buf[..]).unwrap();
        assert_eq!(rows, h.iter().map(CsvRow::from).collect::<Vec<_>>());
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].accuracy.n, 1);
        assert!(read_history_csv(&b"bad,header\n"[..]).is_err());
    }

    #[test]
    fn mean_std_arithmetic() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }
}
