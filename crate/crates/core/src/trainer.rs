//! Training loop: epochs over anchors, mining against a periodically
//! refreshed feature cache, loss evaluation and Adam updates.
//!
//! Anchors of an epoch are processed in refresh windows. A window holds the
//! batches that fit before the cache goes stale; their tuples are assembled
//! by the worker pool against one cache snapshot and consumed in order, so a
//! run is bit-identical for any thread count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{Activation, Adam, Embedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::geodata::Dataset;
use crate::losses::{compute_loss, LossKind, LossSpec, TupleFeatures, TupleGeometry};
use crate::mining::{
    assemble_ordered, refresh_cache, AuditRecord, Miner, MiningConfig, TrainTuple,
    TupleJob,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    /// Every sample is an anchor once per epoch.
    PerImage,
    /// One random sample per route location per epoch.
    PerLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_anchors: usize,
    #[serde(default = "default_epoch_mode")]
    pub epoch_mode: EpochMode,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
}

fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_epoch_mode() -> EpochMode {
    EpochMode::PerImage
}
fn default_queue_depth() -> usize {
    64
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            lr: default_lr(),
            batch_anchors: default_batch(),
            epoch_mode: default_epoch_mode(),
            seed: 0,
            checkpoint_every: 0,
            queue_depth: default_queue_depth(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    /// Hard-positive mining.
    #[serde(default = "yes")]
    pub hp_on: bool,
    /// Pairwise separation of negatives.
    #[serde(default = "yes")]
    pub pn_on: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            hp_on: true,
            pn_on: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ablations: Ablations,
    pub loss: LossSpec,
    #[serde(default)]
    pub mining: MiningConfig,
    pub embedder: EmbedderSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.mining.validate()?;
        self.embedder.validate()?;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", t.lr)));
        }
        if t.batch_anchors == 0 {
            return Err(Error::Config("batch_anchors must be >= 1".into()));
        }
        if t.queue_depth == 0 {
            return Err(Error::Config("queue_depth must be >= 1".into()));
        }
        if self.loss.kind == LossKind::Volume {
            if let Some(r) = self.loss.r {
                if r >= self.embedder.s {
                    return Err(Error::Config(format!(
                        "volume loss needs r < s (r = {r}, s = {})",
                        self.embedder.s
                    )));
                }
            }
        }
        let m = self.effective_mining();
        if m.n_easy_pos + m.n_hard_pos < m.min_positives {
            return Err(Error::Config(format!(
                "{} loss needs {} positives per tuple but only {} are mined",
                self.loss.kind.name(),
                m.min_positives,
                m.n_easy_pos + m.n_hard_pos
            )));
        }
        if m.n_easy_neg + m.n_hard_neg < m.min_negatives {
            return Err(Error::Config(format!(
                "{} loss needs {} negatives per tuple but only {} are mined",
                self.loss.kind.name(),
                m.min_negatives,
                m.n_easy_neg + m.n_hard_neg
            )));
        }
        Ok(())
    }

    /// Mining configuration after ablations and loss minimums are applied.
    pub fn effective_mining(&self) -> MiningConfig {
        let mut m = self.mining.clone();
        if !self.ablations.hp_on {
            m.n_hard_pos = 0;
        }
        if !self.ablations.pn_on {
            m.neighbor_radius = Some(0.0);
        }
        let (min_p, min_n) = match (self.loss.kind, self.loss.r) {
            (LossKind::Volume, Some(r)) => (r + 1, r + 1),
            (kind, _) => (1, kind.min_negatives()),
        };
        m.min_positives = m.min_positives.max(min_p);
        m.min_negatives = m.min_negatives.max(min_n);
        m
    }

    /// Loss specification with the geographic scale filled in.
    pub fn effective_loss(&self) -> LossSpec {
        let mut l = self.loss.clone();
        if l.geo_scale.is_none() {
            l.geo_scale = Some(if self.mining.r1 > 0.0 {
                l.margin / self.mining.r1
            } else {
                0.0
            });
        }
        l
    }
}

/// One row of the metrics log, written after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub iteration: u64,
    /// Mean loss over the tuples of the batch.
    pub loss: f64,
    /// Anchors skipped so far in this epoch.
    pub skips: usize,
    /// Iterations since the cache was built.
    pub cache_age: u64,
}

pub const METRICS_HEADER: &str = "epoch,iteration,loss,skips,cache_age";

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{},{}",
            r.epoch, r.iteration, r.loss, r.skips, r.cache_age
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub anchors: usize,
    pub tuples: usize,
    pub skips: usize,
    pub mean_loss: f64,
}

/// Callbacks fired during training. All methods default to doing nothing.
pub trait TrainObserver {
    fn on_metric(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }
    fn on_tuple(&mut self, _record: &AuditRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _epoch: usize, _embedder: &Embedder) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embedder: Embedder,
    pub metrics: Vec<MetricRow>,
    pub epochs: Vec<EpochSummary>,
    pub iterations: u64,
}

/// Anchor order for one epoch.
pub fn epoch_anchors<R: Rng>(dataset: &Dataset, mode: EpochMode, rng: &mut R) -> Vec<usize> {
    match mode {
        EpochMode::PerImage => {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(rng);
            order
        }
        EpochMode::PerLocation => {
            let mut groups = dataset.location_groups();
            groups.retain(|g| !g.is_empty());
            groups.shuffle(rng);
            groups
                .iter()
                .map(|g| g[rng.random_range(0..g.len())])
                .collect()
        }
    }
}

pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    threads: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.descriptor_dim() != cfg.embedder.d_in {
        return Err(Error::Config(format!(
            "embedder d_in = {} but dataset descriptors have dimension {}",
            cfg.embedder.d_in,
            dataset.descriptor_dim()
        )));
    }
    let mining = cfg.effective_mining();
    let loss = cfg.effective_loss();
    let refresh_every = mining.cache_refresh_every;
    let miner = Miner::new(dataset, mining)?;
    let mut embedder = Embedder::new(cfg.embedder.clone())?;
    let mut adam = Adam::new(cfg.train.lr, embedder.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let batch = cfg.train.batch_anchors;

    let mut iteration: u64 = 0;
    let mut cache = refresh_cache(dataset, &embedder, iteration, threads)?;
    let mut metrics = Vec::new();
    let mut summaries = Vec::new();

    for epoch in 0..cfg.train.epochs {
        let anchors = epoch_anchors(dataset, cfg.train.epoch_mode, &mut rng);
        let salt_base = (epoch as u64) * (dataset.len() as u64);
        let jobs: Vec<TupleJob> = anchors
            .iter()
            .enumerate()
            .map(|(k, &anchor)| TupleJob {
                anchor,
                salt: salt_base + k as u64,
            })
            .collect();

        let mut state = EpochState::default();
        let mut pos = 0;
        while pos < jobs.len() {
            if iteration - cache.built_at_iteration() >= refresh_every {
                cache = refresh_cache(dataset, &embedder, iteration, threads)?;
            }
            let budget = (refresh_every - (iteration - cache.built_at_iteration())) as usize;
            let end = jobs.len().min(pos + budget.saturating_mul(batch));
            let window = &jobs[pos..end];
            let mut pending: Vec<TrainTuple> = Vec::with_capacity(batch);
            let mut seen = 0;
            assemble_ordered(
                &miner,
                &cache,
                window,
                threads,
                cfg.train.queue_depth,
                |_, tuple| {
                    seen += 1;
                    match tuple {
                        Ok(t) => {
                            observer.on_tuple(&t.to_audit(dataset))?;
                            pending.push(t);
                        }
                        Err(_) => state.skips += 1,
                    }
                    if seen % batch == 0 || seen == window.len() {
                        if !pending.is_empty() {
                            let value = step(dataset, &loss, &mut embedder, &mut adam, &pending)?;
                            iteration += 1;
                            state.tuples += pending.len();
                            state.loss_sum += value * pending.len() as f64;
                            let row = MetricRow {
                                epoch,
                                iteration,
                                loss: value,
                                skips: state.skips,
                                cache_age: iteration - cache.built_at_iteration(),
                            };
                            observer.on_metric(&row)?;
                            metrics.push(row);
                        }
                        pending.clear();
                    }
                    Ok(())
                },
            )?;
            pos = end;
        }

        if state.tuples == 0 && !jobs.is_empty() {
            return Err(Error::TrainingStalled { epoch });
        }
        summaries.push(EpochSummary {
            epoch,
            anchors: jobs.len(),
            tuples: state.tuples,
            skips: state.skips,
            mean_loss: if state.tuples > 0 {
                state.loss_sum / state.tuples as f64
            } else {
                0.0
            },
        });
        let every = cfg.train.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 {
            observer.on_checkpoint(epoch + 1, &embedder)?;
        }
    }

    Ok(TrainOutcome {
        embedder,
        metrics,
        epochs: summaries,
        iterations: iteration,
    })
}

#[derive(Default)]
struct EpochState {
    tuples: usize,
    skips: usize,
    loss_sum: f64,
}

/// Forward, loss and backward for one batch followed by a single Adam
/// update on the mean gradient. Returns the mean loss.
fn step(
    dataset: &Dataset,
    loss: &LossSpec,
    embedder: &mut Embedder,
    adam: &mut Adam,
    batch: &[TrainTuple],
) -> Result<f64> {
    let mut grads = embedder.zero_grad();
    let mut total = 0.0;
    for t in batch {
        total += tuple_loss_and_grad(dataset, loss, embedder, t, &mut grads)?;
    }
    let n = batch.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    adam.step(embedder, &grads)?;
    Ok(total / n)
}

/// Loss of one tuple under the current parameters; `∂L/∂θ` is added to
/// `grads`.
pub fn tuple_loss_and_grad(
    dataset: &Dataset,
    loss: &LossSpec,
    embedder: &Embedder,
    tuple: &TrainTuple,
    grads: &mut [f64],
) -> Result<f64> {
    let samples = dataset.samples();
    let fwd = |i: usize| embedder.forward(&samples[i].descriptor);
    let anchor = fwd(tuple.anchor)?;
    let positives = tuple
        .positives
        .iter()
        .map(|p| fwd(p.index))
        .collect::<Result<Vec<_>>>()?;
    let negatives = tuple
        .negatives
        .iter()
        .map(|p| fwd(p.index))
        .collect::<Result<Vec<_>>>()?;
    let features = TupleFeatures {
        anchor: anchor.feature().clone().into_inner(),
        positives: columns(&positives),
        negatives: columns(&negatives),
    };
    let geometry = TupleGeometry {
        anchor: samples[tuple.anchor].location,
        positives: tuple
            .positives
            .iter()
            .map(|p| samples[p.index].location)
            .collect(),
    };
    let out = compute_loss(loss, &features, Some(&geometry))?;
    if out.active {
        embedder.backward(&anchor, &out.grad_anchor, grads)?;
        for (j, act) in positives.iter().enumerate() {
            embedder.backward(act, &out.grad_positives.column(j).into_owned(), grads)?;
        }
        for (j, act) in negatives.iter().enumerate() {
            embedder.backward(act, &out.grad_negatives.column(j).into_owned(), grads)?;
        }
    }
    Ok(out.value)
}

fn columns(acts: &[Activation]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = acts.iter().map(|a| (**a.feature()).clone()).collect();
    DMatrix::from_columns(&cols)
}
