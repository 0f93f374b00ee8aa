//! Tuple losses with analytic gradients.
//!
//! Every loss consumes a [`TupleFeatures`] (anchor, positives as columns,
//! negatives as columns) and returns the value together with its gradient
//! with respect to every feature. Hinge kinks take the zero subgradient and
//! ties in a `max` go to the lowest index.
//!
//! The triplet family compares the positive distance `d_pos²` (closest
//! positive, or farthest positive in Hausdorff mode) against anchor-negative
//! distances:
//!
//! | kind              | value                                                             |
//! |-------------------|-------------------------------------------------------------------|
//! | triplet           | `Σ_n [d_pos² − ‖a−n‖² + m]₊`                                       |
//! | quadruplet        | triplet `+ Σ_{i<j} [d_pos² − ‖n_i−n_j‖² + m2]₊`                     |
//! | lazy_*            | the sums above replaced by a max                                  |
//! | triplet_distance  | triplet `+ λ Σ_p ρ(‖a−p‖² − β·dist(x_a, x_p))`, `ρ(u) = u²/2`       |
//! | triplet_huber     | as above with `ρ` the Huber function of width `huber_delta`        |
//!
//! The volume loss is `V²(a, P) − V²(a, N)`, see [`crate::volume`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{geo_distance, Location};
use crate::volume::grad_squared_volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Volume,
    Triplet,
    Quadruplet,
    LazyTriplet,
    LazyQuadruplet,
    TripletDistance,
    TripletHuber,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Volume,
        LossKind::Triplet,
        LossKind::Quadruplet,
        LossKind::LazyTriplet,
        LossKind::LazyQuadruplet,
        LossKind::TripletDistance,
        LossKind::TripletHuber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Volume => "volume",
            LossKind::Triplet => "triplet",
            LossKind::Quadruplet => "quadruplet",
            LossKind::LazyTriplet => "lazy_triplet",
            LossKind::LazyQuadruplet => "lazy_quadruplet",
            LossKind::TripletDistance => "triplet_distance",
            LossKind::TripletHuber => "triplet_huber",
        }
    }

    pub fn needs_geometry(self) -> bool {
        matches!(self, LossKind::TripletDistance | LossKind::TripletHuber)
    }

    /// Smallest negative set the loss accepts.
    pub fn min_negatives(self) -> usize {
        match self {
            LossKind::Quadruplet | LossKind::LazyQuadruplet => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_margin2")]
    pub margin2: f64,
    #[serde(default = "default_huber_delta")]
    pub huber_delta: f64,
    #[serde(default)]
    pub use_hausdorff_positive: bool,
    /// Projected dimension of the volume loss; `None` uses the full determinant.
    #[serde(default = "default_r")]
    pub r: Option<usize>,
    #[serde(default = "default_distance_weight")]
    pub distance_weight: f64,
    /// Scale `β` turning geographic distance into squared feature distance.
    /// Unset means `margin / r1`, filled in by the trainer.
    #[serde(default)]
    pub geo_scale: Option<f64>,
}

fn default_margin() -> f64 {
    0.5
}
fn default_margin2() -> f64 {
    0.25
}
fn default_huber_delta() -> f64 {
    0.5
}
fn default_r() -> Option<usize> {
    Some(4)
}
fn default_distance_weight() -> f64 {
    0.1
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            margin: default_margin(),
            margin2: default_margin2(),
            huber_delta: default_huber_delta(),
            use_hausdorff_positive: false,
            r: default_r(),
            distance_weight: default_distance_weight(),
            geo_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.margin, self.margin2, self.huber_delta, self.distance_weight]
            .iter()
            .chain(self.geo_scale.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if self.margin < 0.0 || self.margin2 < 0.0 {
            return Err(Error::Config("margins must be >= 0".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::Config("huber_delta must be > 0".into()));
        }
        if self.distance_weight < 0.0 {
            return Err(Error::Config("distance_weight must be >= 0".into()));
        }
        if self.geo_scale.is_some_and(|b| b < 0.0) {
            return Err(Error::Config("geo_scale must be >= 0".into()));
        }
        if self.r == Some(0) {
            return Err(Error::Config("r must be >= 1".into()));
        }
        Ok(())
    }
}

/// Features of one mined tuple; positives and negatives are columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleFeatures {
    pub anchor: DVector<f64>,
    pub positives: DMatrix<f64>,
    pub negatives: DMatrix<f64>,
}

/// Locations of the anchor and its positives, for the distance-regularized
/// losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleGeometry {
    pub anchor: Location,
    pub positives: Vec<Location>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_anchor: DVector<f64>,
    pub grad_positives: DMatrix<f64>,
    pub grad_negatives: DMatrix<f64>,
    pub active: bool,
}

impl LossOutput {
    fn zeros(t: &TupleFeatures) -> Self {
        let s = t.anchor.len();
        Self {
            value: 0.0,
            grad_anchor: DVector::zeros(s),
            grad_positives: DMatrix::zeros(s, t.positives.ncols()),
            grad_negatives: DMatrix::zeros(s, t.negatives.ncols()),
            active: false,
        }
    }
}

fn check_tuple(t: &TupleFeatures, min_negatives: usize) -> Result<()> {
    let s = t.anchor.len();
    if t.positives.nrows() != s || t.negatives.nrows() != s {
        return Err(Error::Shape(format!(
            "anchor dimension {s}, positives {}, negatives {}",
            t.positives.nrows(),
            t.negatives.nrows()
        )));
    }
    if t.positives.ncols() == 0 {
        return Err(Error::Contract("tuple has no positives".into()));
    }
    if t.negatives.ncols() < min_negatives {
        return Err(Error::Contract(format!(
            "tuple has {} negatives, loss needs at least {min_negatives}",
            t.negatives.ncols()
        )));
    }
    Ok(())
}

fn sq_dist(a: &DVector<f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(index, ‖a − p‖²)` of the closest positive, or the farthest one when
/// `hausdorff` is set. Ties go to the lowest index.
fn positive_distance(t: &TupleFeatures, hausdorff: bool) -> (usize, f64) {
    let mut best = (0, sq_dist(&t.anchor, t.positives.column(0)));
    for j in 1..t.positives.ncols() {
        let d = sq_dist(&t.anchor, t.positives.column(j));
        if (hausdorff && d > best.1) || (!hausdorff && d < best.1) {
            best = (j, d);
        }
    }
    best
}

/// Sum in ascending order, independent of the order terms were produced in.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Adds `w · ∂d_pos²` to the gradients.
fn add_positive_grad(out: &mut LossOutput, t: &TupleFeatures, pos: usize, w: f64) {
    let diff = &t.anchor - t.positives.column(pos);
    out.grad_anchor += 2.0 * w * &diff;
    let mut col = out.grad_positives.column_mut(pos);
    col -= 2.0 * w * diff;
}

/// Adds `w · ∂(−‖a − n‖²)` to the gradients.
fn add_negative_grad(out: &mut LossOutput, t: &TupleFeatures, neg: usize, w: f64) {
    let diff = &t.anchor - t.negatives.column(neg);
    out.grad_anchor -= 2.0 * w * &diff;
    let mut col = out.grad_negatives.column_mut(neg);
    col += 2.0 * w * diff;
}

/// Adds `w · ∂(−‖n_i − n_j‖²)` to the gradients.
fn add_pair_grad(out: &mut LossOutput, t: &TupleFeatures, i: usize, j: usize, w: f64) {
    let diff = t.negatives.column(i) - t.negatives.column(j);
    let mut ci = out.grad_negatives.column_mut(i);
    ci -= 2.0 * w * &diff;
    let mut cj = out.grad_negatives.column_mut(j);
    cj += 2.0 * w * diff;
}

/// Triplet hinge over negatives, summed or (lazy) maximized.
fn triplet_term(out: &mut LossOutput, t: &TupleFeatures, spec: &LossSpec, lazy: bool) {
    let (pos, d_pos) = positive_distance(t, spec.use_hausdorff_positive);
    let hinges: Vec<f64> = (0..t.negatives.ncols())
        .map(|n| d_pos - sq_dist(&t.anchor, t.negatives.column(n)) + spec.margin)
        .collect();
    let active = active_hinges(&hinges, lazy);
    out.value += ordered_sum(active.iter().map(|&n| hinges[n]).collect());
    for n in active {
        out.active = true;
        add_positive_grad(out, t, pos, 1.0);
        add_negative_grad(out, t, n, 1.0);
    }
}

/// Second quadruplet hinge over unordered negative pairs.
fn pair_term(out: &mut LossOutput, t: &TupleFeatures, spec: &LossSpec, lazy: bool) {
    let (pos, d_pos) = positive_distance(t, spec.use_hausdorff_positive);
    let n = t.negatives.ncols();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let hinges: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            let diff = t.negatives.column(i) - t.negatives.column(j);
            d_pos - diff.norm_squared() + spec.margin2
        })
        .collect();
    let active = active_hinges(&hinges, lazy);
    out.value += ordered_sum(active.iter().map(|&k| hinges[k]).collect());
    for k in active {
        let (i, j) = pairs[k];
        out.active = true;
        add_positive_grad(out, t, pos, 1.0);
        add_pair_grad(out, t, i, j, 1.0);
    }
}

/// Indices of the hinges that contribute: every positive one, or only the
/// first maximal one when `lazy`.
fn active_hinges(hinges: &[f64], lazy: bool) -> Vec<usize> {
    if lazy {
        let mut best = 0;
        for (k, &h) in hinges.iter().enumerate() {
            if h > hinges[best] {
                best = k;
            }
        }
        if hinges.get(best).is_some_and(|&h| h > 0.0) {
            vec![best]
        } else {
            Vec::new()
        }
    } else {
        (0..hinges.len()).filter(|&k| hinges[k] > 0.0).collect()
    }
}

pub fn triplet_loss(t: &TupleFeatures, spec: &LossSpec) -> Result<LossOutput> {
    check_tuple(t, 1)?;
    let mut out = LossOutput::zeros(t);
    triplet_term(&mut out, t, spec, false);
    Ok(out)
}

pub fn lazy_triplet_loss(t: &TupleFeatures, spec: &LossSpec) -> Result<LossOutput> {
    check_tuple(t, 1)?;
    let mut out = LossOutput::zeros(t);
    triplet_term(&mut out, t, spec, true);
    Ok(out)
}

pub fn quadruplet_loss(t: &TupleFeatures, spec: &LossSpec) -> Result<LossOutput> {
    check_tuple(t, 2)?;
    let mut out = LossOutput::zeros(t);
    triplet_term(&mut out, t, spec, false);
    pair_term(&mut out, t, spec, false);
    Ok(out)
}

pub fn lazy_quadruplet_loss(t: &TupleFeatures, spec: &LossSpec) -> Result<LossOutput> {
    check_tuple(t, 2)?;
    let mut out = LossOutput::zeros(t);
    triplet_term(&mut out, t, spec, true);
    pair_term(&mut out, t, spec, true);
    Ok(out)
}

/// Huber function and its derivative; `delta = ∞` gives `u²/2`.
fn huber(u: f64, delta: f64) -> (f64, f64) {
    if u.abs() <= delta {
        (0.5 * u * u, u)
    } else {
        (delta * (u.abs() - 0.5 * delta), delta * u.signum())
    }
}

/// Triplet loss plus a regularizer pulling `‖a − p‖²` toward `β·dist(x_a, x_p)`.
/// `huber_delta = None` selects the quadratic (distance) variant.
pub fn triplet_distance_loss(
    t: &TupleFeatures,
    spec: &LossSpec,
    geo: &TupleGeometry,
    huber_delta: Option<f64>,
) -> Result<LossOutput> {
    check_tuple(t, 1)?;
    if geo.positives.len() != t.positives.ncols() {
        return Err(Error::Contract(format!(
            "{} positive locations for {} positives",
            geo.positives.len(),
            t.positives.ncols()
        )));
    }
    let beta = spec.geo_scale.unwrap_or(0.0);
    let delta = huber_delta.unwrap_or(f64::INFINITY);
    let mut out = LossOutput::zeros(t);
    triplet_term(&mut out, t, spec, false);
    if spec.distance_weight == 0.0 {
        return Ok(out);
    }
    let mut penalties = Vec::with_capacity(geo.positives.len());
    for (j, &xp) in geo.positives.iter().enumerate() {
        let u = sq_dist(&t.anchor, t.positives.column(j)) - beta * geo_distance(geo.anchor, xp);
        let (rho, drho) = huber(u, delta);
        penalties.push(spec.distance_weight * rho);
        if drho != 0.0 {
            out.active = true;
            add_positive_grad(&mut out, t, j, spec.distance_weight * drho);
        }
    }
    out.value += ordered_sum(penalties);
    out.active |= out.value != 0.0;
    Ok(out)
}

/// `V²(a, P) − V²(a, N)` with both volumes reduced to `r` dimensions.
pub fn volume_loss(t: &TupleFeatures, r: Option<usize>) -> Result<LossOutput> {
    check_tuple(t, 1)?;
    if let Some(r) = r {
        let limit = t
            .anchor
            .len()
            .min(t.positives.ncols())
            .min(t.negatives.ncols());
        if r >= limit {
            return Err(Error::Contract(format!(
                "volume loss needs r < min(s, |P|, |N|) = {limit}, got r = {r}"
            )));
        }
    }
    let pos = grad_squared_volume(&t.anchor, &t.positives, r)?;
    let neg = grad_squared_volume(&t.anchor, &t.negatives, r)?;
    Ok(LossOutput {
        value: pos.squared_volume - neg.squared_volume,
        grad_anchor: pos.grad_anchor - neg.grad_anchor,
        grad_positives: pos.grad_members,
        grad_negatives: -neg.grad_members,
        active: true,
    })
}

/// Dispatches on `spec.kind`. `geo` is required by the distance-regularized
/// kinds and ignored otherwise.
pub fn compute_loss(
    spec: &LossSpec,
    t: &TupleFeatures,
    geo: Option<&TupleGeometry>,
) -> Result<LossOutput> {
    match spec.kind {
        LossKind::Volume => volume_loss(t, spec.r),
        LossKind::Triplet => triplet_loss(t, spec),
        LossKind::Quadruplet => quadruplet_loss(t, spec),
        LossKind::LazyTriplet => lazy_triplet_loss(t, spec),
        LossKind::LazyQuadruplet => lazy_quadruplet_loss(t, spec),
        LossKind::TripletDistance | LossKind::TripletHuber => {
            let geo = geo.ok_or_else(|| {
                Error::Contract(format!("{} needs tuple locations", spec.kind.name()))
            })?;
            let delta = (spec.kind == LossKind::TripletHuber).then_some(spec.huber_delta);
            triplet_distance_loss(t, spec, geo, delta)
        }
    }
}
