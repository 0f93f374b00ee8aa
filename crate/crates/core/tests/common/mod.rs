//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use voloc_core::embedder::{Architecture, Embedder, EmbedderSpec};
use voloc_core::geodata::{Dataset, GeoSample, Split};
use voloc_core::losses::{LossKind, LossSpec};
use voloc_core::mining::{Pick, Provenance, TrainTuple};
use voloc_core::trainer::tuple_loss_and_grad;

pub const FD_STEP: f64 = 1e-5;

/// A random tuple over a small random dataset: sample 0 is the anchor,
/// the next `n_pos` are positives and the rest negatives.
pub struct GradFixture {
    pub dataset: Dataset,
    pub tuple: TrainTuple,
    pub embedder: Embedder,
    pub loss: LossSpec,
}

pub fn grad_fixture(kind: LossKind, seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, s, n_pos, n_neg) = (6, 4, 3, 4);
    let n = 1 + n_pos + n_neg;
    let samples = (0..n)
        .map(|i| GeoSample {
            id: i as u64,
            location: [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
            yaw: 0.0,
            condition: "c".into(),
            descriptor: (0..d_in).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let dataset = Dataset::new(samples, Split::Train, None).unwrap();
    let pick = |index| Pick {
        index,
        provenance: Provenance::Easy,
    };
    let tuple = TrainTuple {
        anchor: 0,
        positives: (1..=n_pos).map(pick).collect(),
        negatives: (n_pos + 1..n).map(pick).collect(),
        cache_iteration: 0,
    };
    let architecture = if seed.is_multiple_of(2) {
        Architecture::Linear
    } else {
        Architecture::Mlp { hidden: 5 }
    };
    let embedder = Embedder::new(EmbedderSpec {
        architecture,
        d_in,
        s,
        seed,
    })
    .unwrap();
    // wide margins keep most hinges active
    let loss = LossSpec {
        margin: 1.5,
        margin2: 1.0,
        huber_delta: 0.3,
        use_hausdorff_positive: seed.is_multiple_of(3),
        r: Some(2),
        distance_weight: 0.5,
        geo_scale: Some(0.05),
        ..LossSpec::new(kind)
    };
    GradFixture {
        dataset,
        tuple,
        embedder,
        loss,
    }
}

fn value_at(f: &GradFixture, params: &[f64]) -> f64 {
    let e = Embedder::from_params(f.embedder.spec().clone(), params.to_vec()).unwrap();
    let mut scratch = e.zero_grad();
    tuple_loss_and_grad(&f.dataset, &f.loss, &e, &f.tuple, &mut scratch).unwrap()
}

/// Largest relative error between the analytic parameter gradient and
/// central differences, or `None` when the fixture sits on a kink (left and
/// right differences disagree).
pub fn max_relative_error(f: &GradFixture) -> Option<f64> {
    let mut analytic = f.embedder.zero_grad();
    let v0 = tuple_loss_and_grad(&f.dataset, &f.loss, &f.embedder, &f.tuple, &mut analytic).unwrap();
    let base = f.embedder.params().to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + FD_STEP;
        let up = value_at(f, &p);
        p[k] = base[k] - FD_STEP;
        let down = value_at(f, &p);
        let fwd = (up - v0) / FD_STEP;
        let bwd = (v0 - down) / FD_STEP;
        let central = (up - down) / (2.0 * FD_STEP);
        let scale = fwd.abs().max(bwd.abs()).max(1e-3);
        if (fwd - bwd).abs() > 1e-2 * scale {
            return None;
        }
        let denom = analytic[k].abs().max(central.abs()).max(1e-6);
        worst = worst.max((analytic[k] - central).abs() / denom);
    }
    Some(worst)
}

/// Runs fixtures from `first_seed` upward until `count` land off kinks.
/// Returns the worst error and the number of kink rejections.
pub fn gradient_sweep(kind: LossKind, count: usize, first_seed: u64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut seed = first_seed;
    while accepted < count {
        match max_relative_error(&grad_fixture(kind, seed)) {
            Some(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            None => rejected += 1,
        }
        seed += 1;
        assert!(rejected < 10 * count, "too many kinks for {}", kind.name());
    }
    (worst, rejected)
}

/// Compares `actual` with `tests/golden/<name>`. Set `VOLOC_BLESS=1` to
/// rewrite the file instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("VOLOC_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}
