//! Feature cache, hard-positive and pairwise-negative mining, and tuple
//! assembly.
//!
//! For an anchor `a` the miner builds `P = P* ∪ P†` and `N = N* ∪ N†`:
//!
//! * positives are samples within `r1` of the anchor whose heading differs by
//!   at most `yaw_max`. Easy positives `P*` are drawn uniformly; hard
//!   positives `P†` are drawn from the `top_n` candidates that are *farthest*
//!   from the anchor in cached feature space, since a true positive that
//!   looks different is what forces condition invariance.
//! * negatives are samples at least `r2` away. Hard negatives `N†` are taken
//!   greedily by smallest cached feature distance; every pick removes itself
//!   and all samples within `neighbor_radius` of it from the pool, so the
//!   negatives are also negatives of one another. Easy negatives `N*` are then
//!   drawn uniformly from what remains, with the same removal rule.
//!
//! Samples missing from the cache can only be picked as easy examples.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::DVector;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::geodata::{geo_distance, yaw_difference, Dataset};
use crate::parallel::par_map;
use crate::spatial::GridIndex;

/// Tolerance on the unit norm of cached features.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Snapshot of embedded features, indexed by dataset position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    features: Vec<Option<DVector<f64>>>,
    built_at_iteration: u64,
}

impl FeatureCache {
    pub fn new(features: Vec<Option<DVector<f64>>>, built_at_iteration: u64) -> Result<Self> {
        if let Some(bad) = features
            .iter()
            .flatten()
            .find(|f| (f.norm() - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(Error::Contract(format!(
                "cached feature has norm {}, expected 1",
                bad.norm()
            )));
        }
        Ok(Self {
            features,
            built_at_iteration,
        })
    }

    /// A cache with no entries, for cold starts.
    pub fn empty(len: usize) -> Self {
        Self {
            features: vec![None; len],
            built_at_iteration: 0,
        }
    }

    pub fn get(&self, i: usize) -> Option<&DVector<f64>> {
        self.features.get(i).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Number of samples with a cached feature.
    pub fn coverage(&self) -> usize {
        self.features.iter().filter(|f| f.is_some()).count()
    }

    pub fn built_at_iteration(&self) -> u64 {
        self.built_at_iteration
    }

    fn sq_dist(&self, i: usize, j: usize) -> Option<f64> {
        Some((self.get(i)? - self.get(j)?).norm_squared())
    }
}

/// Embeds every sample of `dataset` with the current parameters.
pub fn refresh_cache(
    dataset: &Dataset,
    embedder: &Embedder,
    iteration: u64,
    threads: usize,
) -> Result<FeatureCache> {
    let features = par_map(dataset.samples(), threads, |s| {
        embedder.embed(&s.descriptor).map(|f| Some(f.into_inner()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    FeatureCache::new(features, iteration)
}

/// Holder for the current cache snapshot. Readers clone the `Arc` and keep a
/// consistent snapshot for as long as they need it; a swap never mutates a
/// snapshot that is already handed out.
#[derive(Debug)]
pub struct CacheSlot {
    current: RwLock<Arc<FeatureCache>>,
}

impl CacheSlot {
    pub fn new(cache: FeatureCache) -> Self {
        Self {
            current: RwLock::new(Arc::new(cache)),
        }
    }

    pub fn snapshot(&self) -> Arc<FeatureCache> {
        Arc::clone(&self.current.read().expect("cache lock poisoned"))
    }

    /// Installs `next`; its iteration stamp may not go backwards.
    pub fn swap(&self, next: FeatureCache) -> Result<()> {
        let mut guard = self.current.write().expect("cache lock poisoned");
        if next.built_at_iteration < guard.built_at_iteration {
            return Err(Error::Contract(format!(
                "cache stamp went backwards: {} -> {}",
                guard.built_at_iteration, next.built_at_iteration
            )));
        }
        *guard = Arc::new(next);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Positive radius, meters.
    #[serde(default = "default_r1")]
    pub r1: f64,
    /// Negative exclusion radius, meters.
    #[serde(default = "default_r2")]
    pub r2: f64,
    /// Largest heading difference for a positive, radians.
    #[serde(default = "default_yaw_max")]
    pub yaw_max: f64,
    #[serde(default = "three")]
    pub n_easy_pos: usize,
    #[serde(default = "three")]
    pub n_hard_pos: usize,
    #[serde(default = "three")]
    pub n_easy_neg: usize,
    #[serde(default = "three")]
    pub n_hard_neg: usize,
    /// Size of the hard-positive candidate pool.
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    /// Removal radius around each picked negative; defaults to `r2`.
    #[serde(default)]
    pub neighbor_radius: Option<f64>,
    /// Optimizer iterations between cache refreshes.
    #[serde(default = "default_refresh")]
    pub cache_refresh_every: u64,
    #[serde(default)]
    pub seed: u64,
    /// Tuples with fewer positives are skipped.
    #[serde(default = "one")]
    pub min_positives: usize,
    /// Tuples with fewer negatives are skipped.
    #[serde(default = "one")]
    pub min_negatives: usize,
}

fn default_r1() -> f64 {
    10.0
}
fn default_r2() -> f64 {
    25.0
}
fn default_yaw_max() -> f64 {
    PI / 6.0
}
fn three() -> usize {
    3
}
fn one() -> usize {
    1
}
fn default_top_n() -> usize {
    25
}
fn default_refresh() -> u64 {
    400
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            r1: default_r1(),
            r2: default_r2(),
            yaw_max: default_yaw_max(),
            n_easy_pos: 3,
            n_hard_pos: 3,
            n_easy_neg: 3,
            n_hard_neg: 3,
            top_n: default_top_n(),
            neighbor_radius: None,
            cache_refresh_every: default_refresh(),
            seed: 0,
            min_positives: 1,
            min_negatives: 1,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.r1.is_finite() && self.r2.is_finite() && self.r1 >= 0.0) {
            return bad("r1 and r2 must be finite and non-negative");
        }
        if self.r1 >= self.r2 {
            return Err(Error::Config(format!(
                "r1 must be smaller than r2 (r1 = {}, r2 = {})",
                self.r1, self.r2
            )));
        }
        if !(0.0..=PI).contains(&self.yaw_max) {
            return bad("yaw_max must lie in [0, pi]");
        }
        if self.n_easy_pos + self.n_hard_pos == 0 {
            return bad("n_easy_pos + n_hard_pos must be >= 1");
        }
        if self.n_easy_neg + self.n_hard_neg == 0 {
            return bad("n_easy_neg + n_hard_neg must be >= 1");
        }
        if self.n_hard_pos > 0 && self.top_n == 0 {
            return bad("top_n must be >= 1 when hard positives are mined");
        }
        if self
            .neighbor_radius
            .is_some_and(|r| !(r.is_finite() && r >= 0.0))
        {
            return bad("neighbor_radius must be finite and non-negative");
        }
        if self.cache_refresh_every == 0 {
            return bad("cache_refresh_every must be >= 1");
        }
        Ok(())
    }

    pub fn neighbor_radius(&self) -> f64 {
        self.neighbor_radius.unwrap_or(self.r2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pick {
    /// Position in the dataset.
    pub index: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MiningFailure {
    #[error("anchor {anchor}: {found} positives, need {required}")]
    NoPositives {
        anchor: usize,
        found: usize,
        required: usize,
    },
    #[error("anchor {anchor}: negative pool exhausted after {} of {wanted}", partial.len())]
    MiningStarved {
        anchor: usize,
        partial: Vec<Pick>,
        wanted: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTuple {
    pub anchor: usize,
    pub positives: Vec<Pick>,
    pub negatives: Vec<Pick>,
    pub cache_iteration: u64,
}

impl TrainTuple {
    pub fn positive_indices(&self) -> Vec<usize> {
        self.positives.iter().map(|p| p.index).collect()
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        self.negatives.iter().map(|p| p.index).collect()
    }

    pub fn to_audit(&self, dataset: &Dataset) -> AuditRecord {
        let id = |i: usize| dataset.samples()[i].id;
        let conv = |picks: &[Pick]| {
            picks
                .iter()
                .map(|p| AuditPick {
                    id: id(p.index),
                    hard: p.provenance == Provenance::Hard,
                })
                .collect()
        };
        AuditRecord {
            anchor: id(self.anchor),
            cache_iteration: self.cache_iteration,
            positives: conv(&self.positives),
            negatives: conv(&self.negatives),
        }
    }
}

/// Mining front-end over one training dataset.
#[derive(Debug)]
pub struct Miner<'a> {
    dataset: &'a Dataset,
    cfg: MiningConfig,
    grid: GridIndex,
}

impl<'a> Miner<'a> {
    pub fn new(dataset: &'a Dataset, cfg: MiningConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = GridIndex::new(&dataset.locations(), cfg.r2);
        Ok(Self { dataset, cfg, grid })
    }

    pub fn config(&self) -> &MiningConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Deterministic stream for one (anchor, cache, salt) request.
    pub fn rng(&self, anchor: usize, cache: &FeatureCache, salt: u64) -> ChaCha8Rng {
        let mut h = splitmix(self.cfg.seed);
        h = splitmix(h ^ anchor as u64);
        h = splitmix(h ^ cache.built_at_iteration);
        h = splitmix(h ^ salt);
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Geometric positive candidates: within `r1`, heading within `yaw_max`,
    /// not the anchor. Ascending dataset order.
    pub fn positive_candidates(&self, anchor: usize) -> Vec<usize> {
        let a = &self.dataset.samples()[anchor];
        self.grid
            .within(a.location, self.cfg.r1)
            .into_iter()
            .filter(|&i| {
                i != anchor
                    && yaw_difference(a.yaw, self.dataset.samples()[i].yaw) <= self.cfg.yaw_max
            })
            .collect()
    }

    /// Geometric negative candidates: at least `r2` from the anchor.
    pub fn negative_candidates(&self, anchor: usize) -> Vec<usize> {
        let xa = self.dataset.samples()[anchor].location;
        self.dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(i, s)| *i != anchor && geo_distance(xa, s.location) >= self.cfg.r2)
            .map(|(i, _)| i)
            .collect()
    }

    /// Candidates of the hard-positive pool: cached positives ranked by
    /// descending feature distance to the anchor (ties to the lower index),
    /// truncated to `top_n`.
    pub fn hard_positive_pool(&self, anchor: usize, cache: &FeatureCache) -> Vec<usize> {
        let mut ranked: Vec<(f64, usize)> = self
            .positive_candidates(anchor)
            .into_iter()
            .filter_map(|i| cache.sq_dist(anchor, i).map(|d| (d, i)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(self.cfg.top_n);
        ranked.into_iter().map(|(_, i)| i).collect()
    }

    /// Hard-positive mining. Returns `P* ∪ P†`, hard picks marked as such.
    pub fn hard_pos<R: Rng>(
        &self,
        anchor: usize,
        cache: &FeatureCache,
        rng: &mut R,
    ) -> std::result::Result<Vec<Pick>, MiningFailure> {
        let candidates = self.positive_candidates(anchor);
        if candidates.is_empty() {
            return Err(MiningFailure::NoPositives {
                anchor,
                found: 0,
                required: self.cfg.min_positives.max(1),
            });
        }
        let easy: Vec<usize> = sample_without_replacement(&candidates, self.cfg.n_easy_pos, rng);
        let hard: Vec<usize> = if self.cfg.n_hard_pos > 0 {
            let pool = self.hard_positive_pool(anchor, cache);
            sample_without_replacement(&pool, self.cfg.n_hard_pos, rng)
        } else {
            Vec::new()
        };
        let mut picks: Vec<Pick> = easy
            .into_iter()
            .filter(|i| !hard.contains(i))
            .map(|index| Pick {
                index,
                provenance: Provenance::Easy,
            })
            .collect();
        picks.extend(hard.into_iter().map(|index| Pick {
            index,
            provenance: Provenance::Hard,
        }));
        Ok(picks)
    }

    /// Pairwise-negative mining. On an exhausted pool the partial set is
    /// returned inside [`MiningFailure::MiningStarved`].
    pub fn pair_neg<R: Rng>(
        &self,
        anchor: usize,
        cache: &FeatureCache,
        rng: &mut R,
    ) -> std::result::Result<Vec<Pick>, MiningFailure> {
        let radius = self.cfg.neighbor_radius();
        let samples = self.dataset.samples();
        let candidates = self.negative_candidates(anchor);
        let mut picks: Vec<Pick> = Vec::new();
        let removed = |i: usize, picks: &[Pick]| {
            picks.iter().any(|p| {
                p.index == i || geo_distance(samples[p.index].location, samples[i].location) < radius
            })
        };

        if self.cfg.n_hard_neg > 0 {
            let mut ranked: Vec<(f64, usize)> = candidates
                .iter()
                .filter_map(|&i| cache.sq_dist(anchor, i).map(|d| (d, i)))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, i) in ranked {
                if picks.len() == self.cfg.n_hard_neg {
                    break;
                }
                if !removed(i, &picks) {
                    picks.push(Pick {
                        index: i,
                        provenance: Provenance::Hard,
                    });
                }
            }
        }

        let hard_found = picks.len();
        let mut order = candidates;
        order.shuffle(rng);
        let mut easy_found = 0;
        for i in order {
            if easy_found == self.cfg.n_easy_neg {
                break;
            }
            if !removed(i, &picks) {
                picks.push(Pick {
                    index: i,
                    provenance: Provenance::Easy,
                });
                easy_found += 1;
            }
        }

        if hard_found < self.cfg.n_hard_neg || easy_found < self.cfg.n_easy_neg {
            return Err(MiningFailure::MiningStarved {
                anchor,
                partial: picks,
                wanted: self.cfg.n_hard_neg + self.cfg.n_easy_neg,
            });
        }
        Ok(picks)
    }

    /// Builds the full tuple for `anchor`. `salt` distinguishes repeated
    /// requests for the same anchor against the same cache.
    pub fn assemble_tuple(
        &self,
        anchor: usize,
        cache: &FeatureCache,
        salt: u64,
    ) -> std::result::Result<TrainTuple, MiningFailure> {
        let mut rng = self.rng(anchor, cache, salt);
        let positives = self.hard_pos(anchor, cache, &mut rng)?;
        if positives.len() < self.cfg.min_positives {
            return Err(MiningFailure::NoPositives {
                anchor,
                found: positives.len(),
                required: self.cfg.min_positives,
            });
        }
        let negatives = match self.pair_neg(anchor, cache, &mut rng) {
            Ok(n) => n,
            Err(MiningFailure::MiningStarved { partial, .. })
                if partial.len() >= self.cfg.min_negatives.max(1) =>
            {
                partial
            }
            Err(e) => return Err(e),
        };
        Ok(TrainTuple {
            anchor,
            positives,
            negatives,
            cache_iteration: cache.built_at_iteration,
        })
    }
}

fn sample_without_replacement<R: Rng>(items: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    let amount = amount.min(items.len());
    index::sample(rng, items.len(), amount)
        .into_iter()
        .map(|k| items[k])
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TupleJob {
    pub anchor: usize,
    pub salt: u64,
}

/// Assembles tuples for `jobs` on a worker pool and hands them to `consume`
/// in job order through a bounded queue.
///
/// All jobs read the same cache snapshot, so the output is identical for any
/// thread count. If `consume` fails the workers are cancelled, the queue is
/// drained and the error is returned.
pub fn assemble_ordered<F>(
    miner: &Miner<'_>,
    cache: &FeatureCache,
    jobs: &[TupleJob],
    threads: usize,
    queue_depth: usize,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(usize, std::result::Result<TrainTuple, MiningFailure>) -> Result<()>,
{
    if threads <= 1 || jobs.len() <= 1 {
        for (k, job) in jobs.iter().enumerate() {
            consume(k, miner.assemble_tuple(job.anchor, cache, job.salt))?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let cancel = AtomicBool::new(false);
    let (tx, rx) = crossbeam_channel::bounded(queue_depth.max(1));
    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()) {
            let tx = tx.clone();
            let (next, cancel) = (&next, &cancel);
            scope.spawn(move || loop {
                if cancel.load(Ordering::Relaxed) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(k) else { break };
                let tuple = miner.assemble_tuple(job.anchor, cache, job.salt);
                if tx.send((k, tuple)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut expected = 0;
        let mut outcome = Ok(());
        for (k, tuple) in rx.iter() {
            pending.insert(k, tuple);
            while let Some(tuple) = pending.remove(&expected) {
                if let Err(e) = consume(expected, tuple) {
                    outcome = Err(e);
                    break;
                }
                expected += 1;
            }
            if outcome.is_err() {
                cancel.store(true, Ordering::Relaxed);
                break;
            }
        }
        // unblock any sender still waiting on a full queue
        drop(rx);
        outcome
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditPick {
    pub id: u64,
    pub hard: bool,
}

/// One line of the mining audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub anchor: u64,
    pub cache_iteration: u64,
    pub positives: Vec<AuditPick>,
    pub negatives: Vec<AuditPick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownId,
    PositiveRadius,
    PositiveYaw,
    NegativeRadius,
    PairwiseSeparation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub anchor: u64,
    pub detail: String,
}

/// Checks audit records against the geometric tuple constraints.
#[derive(Debug)]
pub struct Auditor<'a> {
    dataset: &'a Dataset,
    by_id: HashMap<u64, usize>,
    r1: f64,
    r2: f64,
    yaw_max: f64,
    neighbor_radius: f64,
}

impl<'a> Auditor<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &MiningConfig) -> Self {
        let by_id = dataset
            .samples()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect();
        Self {
            dataset,
            by_id,
            r1: cfg.r1,
            r2: cfg.r2,
            yaw_max: cfg.yaw_max,
            neighbor_radius: cfg.neighbor_radius(),
        }
    }

    pub fn check(&self, record: &AuditRecord) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |kind, detail: String| {
            out.push(Violation {
                kind,
                anchor: record.anchor,
                detail,
            })
        };
        let lookup = |id: u64| self.by_id.get(&id).map(|&i| &self.dataset.samples()[i]);
        let Some(anchor) = lookup(record.anchor) else {
            flag(ViolationKind::UnknownId, format!("anchor id {}", record.anchor));
            return out;
        };
        for p in &record.positives {
            let Some(s) = lookup(p.id) else {
                flag(ViolationKind::UnknownId, format!("positive id {}", p.id));
                continue;
            };
            let d = geo_distance(anchor.location, s.location);
            if d > self.r1 {
                flag(ViolationKind::PositiveRadius, format!("positive {} at {d} m", p.id));
            }
            let yaw = yaw_difference(anchor.yaw, s.yaw);
            if yaw > self.yaw_max {
                flag(ViolationKind::PositiveYaw, format!("positive {} yaw diff {yaw}", p.id));
            }
        }
        let mut negs = Vec::new();
        for n in &record.negatives {
            let Some(s) = lookup(n.id) else {
                flag(ViolationKind::UnknownId, format!("negative id {}", n.id));
                continue;
            };
            let d = geo_distance(anchor.location, s.location);
            if d < self.r2 {
                flag(ViolationKind::NegativeRadius, format!("negative {} at {d} m", n.id));
            }
            negs.push((n.id, s.location));
        }
        for (i, &(id_i, xi)) in negs.iter().enumerate() {
            for &(id_j, xj) in &negs[i + 1..] {
                let d = geo_distance(xi, xj);
                if d < self.neighbor_radius {
                    flag(
                        ViolationKind::PairwiseSeparation,
                        format!("negatives {id_i} and {id_j} are {d} m apart"),
                    );
                }
            }
        }
        out
    }
}
