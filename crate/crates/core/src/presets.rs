//! The synthetic fixture world used by tests, the CLI fixtures and the demo.
//!
//! Training happens on a 200-location loop with roughly 2 m between
//! locations. Evaluation uses a second loop far away, so no test location is
//! ever seen in training: references are the base condition, queries sit half
//! a step off the reference positions and come in every condition with fresh
//! noise. Both loops share the world seed and therefore the same descriptor
//! field and condition transforms.
//!
//! `dusk` and `rain` each distort their own block of 8 descriptor
//! coordinates, and the severe `night` condition rotates, attenuates and
//! offsets the first 24 of 32. The last 8 are left alone, so a condition
//! invariant embedding exists but has to be learned. Night is also rare in
//! training: it appears in one of the three passes.

use crate::embedder::{Architecture, EmbedderSpec};
use crate::error::Result;
use crate::geodata::{generate_passes, generate_world, with_split, ConditionSpec, Dataset, RouteSpec, Split, SyntheticWorldConfig};
use crate::losses::{LossKind, LossSpec};
use crate::mining::MiningConfig;
use crate::trainer::{Ablations, EpochMode, TrainConfig, TrainSection};

pub const FIXTURE_LOCATIONS: usize = 200;
/// Training passes over the loop; the severe condition appears in the first
/// pass only, so it is rare among positives as in real driving logs.
pub const FIXTURE_TRAIN_PASSES: usize = 3;
pub const FIXTURE_TEST_LOCATIONS: usize = 100;
pub const FIXTURE_D_IN: usize = 32;
pub const FIXTURE_S: usize = 16;
/// Evaluation threshold of the fixture, meters.
pub const FIXTURE_THRESHOLD: f64 = 5.0;
pub const SEVERE_CONDITION: &str = "night";
pub const EASY_CONDITION: &str = "day";

const REFERENCE_ID_OFFSET: u64 = 1_000_000;
const QUERY_ID_OFFSET: u64 = 2_000_000;

pub fn fixture_conditions() -> Vec<ConditionSpec> {
    vec![
        ConditionSpec {
            noise: 0.01,
            ..ConditionSpec::identity(EASY_CONDITION)
        },
        ConditionSpec {
            rotation: 0.8,
            gain: 0.7,
            bias: 0.1,
            noise: 0.02,
            affected: Some(8),
            ..ConditionSpec::identity("dusk")
        },
        ConditionSpec {
            rotation: 0.8,
            gain: 0.7,
            bias: 0.1,
            noise: 0.05,
            affected: Some(8),
            offset: 8,
            ..ConditionSpec::identity("rain")
        },
        ConditionSpec {
            rotation: 1.2,
            gain: 0.5,
            bias: 0.15,
            noise: 0.03,
            affected: Some(24),
            ..ConditionSpec::identity(SEVERE_CONDITION)
        },
    ]
}

fn loop_radius(n: usize, step: f64) -> f64 {
    n as f64 * step / (2.0 * std::f64::consts::PI)
}

pub fn fixture_train_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        n_locations: FIXTURE_LOCATIONS,
        route: RouteSpec {
            center: [0.0, 0.0],
            radius: loop_radius(FIXTURE_LOCATIONS, 2.0),
            aspect: 1.0,
            phase: 0.0,
        },
        conditions: fixture_conditions(),
        d_in: FIXTURE_D_IN,
        length_scale: 10.0,
        seed,
        noise_seed: None,
        id_offset: 0,
    }
}

fn test_route(phase: f64) -> RouteSpec {
    RouteSpec {
        center: [1000.0, 0.0],
        radius: loop_radius(FIXTURE_TEST_LOCATIONS, 2.0),
        aspect: 1.0,
        phase,
    }
}

pub fn fixture_reference_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        n_locations: FIXTURE_TEST_LOCATIONS,
        route: test_route(0.0),
        conditions: fixture_conditions()[..1].to_vec(),
        d_in: FIXTURE_D_IN,
        length_scale: 10.0,
        seed,
        noise_seed: Some(seed.wrapping_add(1)),
        id_offset: REFERENCE_ID_OFFSET,
    }
}

pub fn fixture_query_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        n_locations: FIXTURE_TEST_LOCATIONS,
        route: test_route(0.5),
        conditions: fixture_conditions(),
        d_in: FIXTURE_D_IN,
        length_scale: 10.0,
        seed,
        noise_seed: Some(seed.wrapping_add(2)),
        id_offset: QUERY_ID_OFFSET,
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSplits {
    pub train: Dataset,
    pub references: Dataset,
    pub queries: Dataset,
}

/// All training passes merged, ordered by pass then location. Every pass
/// uses the full condition list so the condition transforms are shared.
pub fn fixture_train_set(seed: u64) -> Result<Dataset> {
    generate_passes(
        &fixture_train_world(seed),
        FIXTURE_TRAIN_PASSES,
        &[SEVERE_CONDITION.to_string()],
    )
}

pub fn fixture_splits(seed: u64) -> Result<FixtureSplits> {
    Ok(FixtureSplits {
        train: fixture_train_set(seed)?,
        references: with_split(generate_world(&fixture_reference_world(seed))?, Split::Reference),
        queries: with_split(generate_world(&fixture_query_world(seed))?, Split::Query),
    })
}

/// Training configuration matching the fixture's scale.
pub fn fixture_train_config(kind: LossKind, ablations: Ablations, seed: u64) -> TrainConfig {
    TrainConfig {
        train: TrainSection {
            epochs: 10,
            lr: 2e-3,
            batch_anchors: 8,
            epoch_mode: EpochMode::PerLocation,
            seed,
            checkpoint_every: 0,
            queue_depth: 64,
        },
        ablations,
        loss: LossSpec {
            r: Some(2),
            ..LossSpec::new(kind)
        },
        mining: MiningConfig {
            r1: 5.0,
            r2: 15.0,
            n_easy_pos: 3,
            n_hard_pos: 3,
            n_easy_neg: 3,
            n_hard_neg: 3,
            top_n: 10,
            cache_refresh_every: 50,
            seed,
            ..MiningConfig::default()
        },
        embedder: EmbedderSpec {
            architecture: Architecture::Linear,
            d_in: FIXTURE_D_IN,
            s: FIXTURE_S,
            seed,
        },
    }
}
