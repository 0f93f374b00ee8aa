//! Browser demo: a 2-D volume loss explorer, a mining inspector and an
//! accuracy curve. Every export takes and returns JSON strings; the plain
//! `*_json` functions hold the logic so they can be tested natively.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use voloc_core::embedder::Embedder;
use voloc_core::evaluate::{accuracy, evaluate_queries, upper_bound};
use voloc_core::losses::{volume_loss, LossKind, TupleFeatures};
use voloc_core::mining::{FeatureCache, Miner, Provenance};
use voloc_core::presets::{fixture_splits, fixture_train_config, fixture_train_set};
use voloc_core::retrieval::{embed_all, ReferenceMap};
use voloc_core::trainer::{train, Ablations, NoObserver};
use voloc_core::volume::squared_volume;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Deserialize)]
pub struct VolumeRequest {
    pub anchor: [f64; 2],
    pub positives: Vec<[f64; 2]>,
    pub negatives: Vec<[f64; 2]>,
    /// Reduced rank; `None` uses the full determinant.
    pub r: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct VolumeReport {
    pub positive_volume: f64,
    pub negative_volume: f64,
    pub positive_eigenvalues: Vec<f64>,
    pub negative_eigenvalues: Vec<f64>,
    pub loss: f64,
    /// Descent direction (negated gradient) for every point.
    pub step_anchor: [f64; 2],
    pub step_positives: Vec<[f64; 2]>,
    pub step_negatives: Vec<[f64; 2]>,
}

fn columns(points: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(2, points.len(), |i, j| points[j][i])
}

fn neg_columns(m: &DMatrix<f64>) -> Vec<[f64; 2]> {
    m.column_iter().map(|c| [-c[0], -c[1]]).collect()
}

pub fn volume_json(request: &str) -> Result<String> {
    let req: VolumeRequest = serde_json::from_str(request).map_err(err)?;
    let t = TupleFeatures {
        anchor: DVector::from_column_slice(&req.anchor),
        positives: columns(&req.positives),
        negatives: columns(&req.negatives),
    };
    let pos = squared_volume(&t.anchor, &t.positives, req.r).map_err(err)?;
    let neg = squared_volume(&t.anchor, &t.negatives, req.r).map_err(err)?;
    let out = volume_loss(&t, req.r).map_err(err)?;
    let report = VolumeReport {
        positive_volume: pos.squared_volume,
        negative_volume: neg.squared_volume,
        positive_eigenvalues: pos.eigenvalues,
        negative_eigenvalues: neg.eigenvalues,
        loss: out.value,
        step_anchor: [-out.grad_anchor[0], -out.grad_anchor[1]],
        step_positives: neg_columns(&out.grad_positives),
        step_negatives: neg_columns(&out.grad_negatives),
    };
    serde_json::to_string(&report).map_err(err)
}

#[derive(Debug, Deserialize)]
pub struct MiningRequest {
    pub seed: u64,
    /// Index into the training set; wrapped to its length.
    pub anchor: usize,
    #[serde(default = "yes")]
    pub hp_on: bool,
    #[serde(default = "yes")]
    pub pn_on: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize)]
pub struct MinedPoint {
    pub index: usize,
    pub x: [f64; 2],
    pub hard: bool,
}

#[derive(Debug, Serialize)]
pub struct MiningReport {
    pub anchor: MinedPoint,
    pub condition: String,
    pub r1: f64,
    pub r2: f64,
    pub neighbor_radius: f64,
    pub positives: Vec<MinedPoint>,
    pub negatives: Vec<MinedPoint>,
    /// Every distinct route location, for the backdrop.
    pub route: Vec<[f64; 2]>,
}

pub fn mining_json(request: &str) -> Result<String> {
    let req: MiningRequest = serde_json::from_str(request).map_err(err)?;
    let data = fixture_train_set(req.seed).map_err(err)?;
    let cfg = fixture_train_config(
        LossKind::Volume,
        Ablations {
            hp_on: req.hp_on,
            pn_on: req.pn_on,
        },
        req.seed,
    );
    let embedder = Embedder::new(cfg.embedder.clone()).map_err(err)?;
    let features = embed_all(&data, &embedder, 1).map_err(err)?;
    let cache = FeatureCache::new(
        features.into_iter().map(|f| Some(DVector::from_vec(f))).collect(),
        0,
    )
    .map_err(err)?;
    let mining = cfg.effective_mining();
    let miner = Miner::new(&data, mining.clone()).map_err(err)?;
    let anchor = req.anchor % data.len();
    let tuple = miner.assemble_tuple(anchor, &cache, 0).map_err(err)?;
    let samples = data.samples();
    let point = |index: usize, hard: bool| MinedPoint {
        index,
        x: samples[index].location,
        hard,
    };
    let picks = |p: &[voloc_core::mining::Pick]| {
        p.iter()
            .map(|p| point(p.index, p.provenance == Provenance::Hard))
            .collect()
    };
    let report = MiningReport {
        anchor: point(anchor, false),
        condition: samples[anchor].condition.clone(),
        r1: mining.r1,
        r2: mining.r2,
        neighbor_radius: mining.neighbor_radius(),
        positives: picks(&tuple.positives),
        negatives: picks(&tuple.negatives),
        route: data.route_locations().map(<[_]>::to_vec).unwrap_or_default(),
    };
    serde_json::to_string(&report).map_err(err)
}

#[derive(Debug, Deserialize)]
pub struct CurveRequest {
    pub seed: u64,
    pub epochs: usize,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub spacing: f64,
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub condition: String,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct CurveReport {
    pub thresholds: Vec<f64>,
    pub upper_bound: Vec<f64>,
    pub curves: Vec<Curve>,
    pub final_loss: Option<f64>,
}

/// Trains the volume loss for `epochs` (0 keeps the random initialization)
/// and reports accuracy against threshold for every query condition.
pub fn curve_json(request: &str) -> Result<String> {
    let req: CurveRequest = serde_json::from_str(request).map_err(err)?;
    if req.epochs > 20 {
        return Err("at most 20 epochs in the browser".into());
    }
    let splits = fixture_splits(req.seed).map_err(err)?;
    let mut cfg = fixture_train_config(LossKind::Volume, Ablations::default(), req.seed);
    cfg.train.epochs = req.epochs;
    let (embedder, final_loss) = if req.epochs == 0 {
        (Embedder::new(cfg.embedder.clone()).map_err(err)?, None)
    } else {
        let out = train(&splits.train, &cfg, 1, &mut NoObserver).map_err(err)?;
        let loss = out.epochs.last().map(|e| e.mean_loss);
        (out.embedder, loss)
    };
    let map = ReferenceMap::build(&splits.references, &embedder, None, req.spacing, 1).map_err(err)?;
    let outcomes = evaluate_queries(&map, &splits.queries, &embedder, 1).map_err(err)?;

    let mut conditions: Vec<String> = outcomes.iter().map(|o| o.condition.clone()).collect();
    conditions.sort();
    conditions.dedup();
    let mut curves = Vec::new();
    for c in conditions {
        let subset: Vec<_> = outcomes.iter().filter(|o| o.condition == c).cloned().collect();
        let accuracy = req
            .thresholds
            .iter()
            .map(|&d| accuracy(&subset, d))
            .collect::<voloc_core::Result<_>>()
            .map_err(err)?;
        curves.push(Curve { condition: c, accuracy });
    }
    let upper_bound = req
        .thresholds
        .iter()
        .map(|&d| upper_bound(&outcomes, d))
        .collect::<voloc_core::Result<_>>()
        .map_err(err)?;
    serde_json::to_string(&CurveReport {
        thresholds: req.thresholds,
        upper_bound,
        curves,
        final_loss,
    })
    .map_err(err)
}

#[wasm_bindgen]
pub fn volume(request: &str) -> std::result::Result<String, JsValue> {
    volume_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn mine(request: &str) -> std::result::Result<String, JsValue> {
    mining_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn accuracy_curve(request: &str) -> std::result::Result<String, JsValue> {
    curve_json(request).map_err(|e| JsValue::from_str(&e))
}
