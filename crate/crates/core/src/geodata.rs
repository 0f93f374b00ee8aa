//! Geo-tagged samples, JSONL ingestion and the synthetic condition-shifted
//! world generator.
//!
//! A [`GeoSample`] pairs a raw descriptor (the stand-in for an image) with a
//! planar location in meters, a heading and a condition label. The synthetic
//! world places samples along a closed route; the base descriptor is a random
//! Fourier feature map of the location, so places that are close on the map
//! have close base descriptors, and every condition applies a fixed invertible
//! distortion on top of it.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::GridIndex;

/// Planar location in meters.
pub type Location = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoSample {
    pub id: u64,
    #[serde(rename = "x")]
    pub location: Location,
    /// Heading in radians, `[-π, π)`.
    pub yaw: f64,
    pub condition: String,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Reference,
    Query,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "reference" | "ref" | "refs" => Ok(Split::Reference),
            "query" | "queries" => Ok(Split::Query),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Reference => "reference",
            Split::Query => "query",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<GeoSample>,
    split: Split,
    route_locations: Option<Vec<Location>>,
}

impl Dataset {
    /// Validates ids, finiteness, yaw range and descriptor dimensions.
    pub fn new(
        samples: Vec<GeoSample>,
        split: Split,
        route_locations: Option<Vec<Location>>,
    ) -> Result<Self> {
        let mut ids = std::collections::HashSet::with_capacity(samples.len());
        let dim = samples.first().map(|s| s.descriptor.len());
        for s in &samples {
            if !ids.insert(s.id) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
            validate_sample(s).map_err(Error::Validation)?;
            if Some(s.descriptor.len()) != dim {
                return Err(Error::Validation(format!(
                    "sample {} has descriptor dimension {}, expected {}",
                    s.id,
                    s.descriptor.len(),
                    dim.unwrap_or(0)
                )));
            }
        }
        Ok(Self {
            samples,
            split,
            route_locations,
        })
    }

    pub fn samples(&self) -> &[GeoSample] {
        &self.samples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn route_locations(&self) -> Option<&[Location]> {
        self.route_locations.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Descriptor dimension, 0 for an empty dataset.
    pub fn descriptor_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.descriptor.len())
    }

    pub fn locations(&self) -> Vec<Location> {
        self.samples.iter().map(|s| s.location).collect()
    }

    /// Samples grouped by canonical route location.
    ///
    /// With route locations present each sample joins its nearest route
    /// location (empty groups are kept, so group `k` is route location `k`).
    /// Without them, samples sharing bit-identical coordinates form a group,
    /// in order of first appearance.
    pub fn location_groups(&self) -> Vec<Vec<usize>> {
        match &self.route_locations {
            Some(route) if !route.is_empty() => {
                let spacing = route
                    .windows(2)
                    .map(|w| geo_distance(w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                let grid = GridIndex::new(route, spacing);
                let mut groups = vec![Vec::new(); route.len()];
                for (i, s) in self.samples.iter().enumerate() {
                    if let Some(k) = grid.nearest(s.location) {
                        groups[k].push(i);
                    }
                }
                groups
            }
            _ => {
                let mut groups: Vec<Vec<usize>> = Vec::new();
                let mut lookup = std::collections::HashMap::new();
                for (i, s) in self.samples.iter().enumerate() {
                    let k = (s.location[0].to_bits(), s.location[1].to_bits());
                    let g = *lookup.entry(k).or_insert_with(|| {
                        groups.push(Vec::new());
                        groups.len() - 1
                    });
                    groups[g].push(i);
                }
                groups
            }
        }
    }

    /// Writes the dataset as JSONL, one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

fn validate_sample(s: &GeoSample) -> std::result::Result<(), String> {
    if !s.location.iter().all(|v| v.is_finite()) {
        return Err(format!("sample {} has a non-finite location", s.id));
    }
    if !(s.yaw >= -PI && s.yaw < PI) {
        return Err(format!("sample {} has yaw {} outside [-pi, pi)", s.id, s.yaw));
    }
    if !s.descriptor.iter().all(|v| v.is_finite()) {
        return Err(format!("sample {} has a non-finite descriptor", s.id));
    }
    Ok(())
}

/// Parses a JSONL dataset. Blank lines are ignored; line numbers are 1-based.
pub fn read_dataset<R: BufRead>(reader: R, split: Split) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GeoSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        validate_sample(&sample).map_err(|message| Error::Parse {
            line: n + 1,
            message,
        })?;
        samples.push(sample);
    }
    Dataset::new(samples, split, None)
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(BufReader::new(file), split)
}

/// Fails if any sample of `other` lies closer than `separation` to a sample of
/// `train`.
pub fn check_disjoint(train: &Dataset, other: &Dataset, separation: f64) -> Result<()> {
    let grid = GridIndex::new(&train.locations(), separation);
    for s in other.samples() {
        if let Some(&hit) = grid
            .within(s.location, separation)
            .iter()
            .find(|&&i| geo_distance(s.location, grid.location(i)) < separation)
        {
            return Err(Error::Validation(format!(
                "{} sample {} lies {:.3} m from train sample {}, closer than the {separation} m separation",
                other.split(),
                s.id,
                geo_distance(s.location, grid.location(hit)),
                train.samples()[hit].id,
            )));
        }
    }
    Ok(())
}

pub fn geo_distance(a: Location, b: Location) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Smallest absolute angle between two headings, in `[0, π]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Closed elliptical route; `aspect = 1` is a circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub center: Location,
    pub radius: f64,
    #[serde(default = "one")]
    pub aspect: f64,
    /// Offset of the first location, in units of the location step.
    #[serde(default)]
    pub phase: f64,
}

fn one() -> f64 {
    1.0
}

impl RouteSpec {
    /// Location and heading of route point `k` of `n`.
    pub fn point(&self, k: usize, n: usize) -> (Location, f64) {
        let theta = 2.0 * PI * (k as f64 + self.phase) / n as f64;
        let loc = [
            self.center[0] + self.radius * theta.cos(),
            self.center[1] + self.aspect * self.radius * theta.sin(),
        ];
        let heading = (self.aspect * theta.cos()).atan2(-theta.sin());
        (loc, wrap_angle(heading))
    }
}

/// A fixed descriptor-space distortion: rotation of consecutive coordinate
/// pairs, per-coordinate gain and bias over `affected` coordinates starting at
/// `offset`,
/// plus isotropic Gaussian noise over all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    /// Rotation angle applied to each coordinate pair, radians.
    #[serde(default)]
    pub rotation: f64,
    #[serde(default = "one")]
    pub gain: f64,
    /// Magnitude of the per-coordinate bias; signs are drawn from the world seed.
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise: f64,
    /// Number of coordinates the rotation/gain/bias act on; all when absent.
    #[serde(default)]
    pub affected: Option<usize>,
    /// First affected coordinate.
    #[serde(default)]
    pub offset: usize,
}

impl ConditionSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            rotation: 0.0,
            gain: 1.0,
            bias: 0.0,
            noise: 0.0,
            affected: None,
            offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub n_locations: usize,
    pub route: RouteSpec,
    pub conditions: Vec<ConditionSpec>,
    pub d_in: usize,
    /// Length scale of the random Fourier features, meters.
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    pub seed: u64,
    /// Seed for the per-sample noise; defaults to `seed`.
    #[serde(default)]
    pub noise_seed: Option<u64>,
    #[serde(default)]
    pub id_offset: u64,
}

fn default_length_scale() -> f64 {
    10.0
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_locations < 2 {
            return bad(format!("n_locations must be >= 2, got {}", self.n_locations));
        }
        if self.d_in == 0 {
            return bad("d_in must be >= 1".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if !(self.route.radius.is_finite() && self.route.radius > 0.0)
            || !(self.route.aspect.is_finite() && self.route.aspect > 0.0)
            || !self.route.center.iter().all(|v| v.is_finite())
            || !self.route.phase.is_finite()
        {
            return bad("route needs a finite center, positive radius and aspect".into());
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return bad("length_scale must be positive".into());
        }
        for c in &self.conditions {
            let finite = [c.rotation, c.gain, c.bias, c.noise]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return bad(format!("condition `{}` has a non-finite transform", c.name));
            }
            if c.gain == 0.0 {
                return bad(format!("condition `{}` has zero gain (not invertible)", c.name));
            }
            if c.noise < 0.0 {
                return bad(format!("condition `{}` has negative noise sigma", c.name));
            }
            if c.offset + c.affected.unwrap_or(0) > self.d_in || c.offset >= self.d_in {
                return bad(format!(
                    "condition `{}` affects more coordinates than d_in",
                    c.name
                ));
            }
        }
        Ok(())
    }
}

/// Random Fourier feature map of a planar location.
struct FourierField {
    freqs: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl FourierField {
    fn new(d: usize, length_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let freqs = (0..d)
            .map(|_| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                [a / length_scale, b / length_scale]
            })
            .collect();
        let phases = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self { freqs, phases }
    }

    fn eval(&self, x: Location) -> DVector<f64> {
        let scale = (2.0 / self.freqs.len() as f64).sqrt();
        DVector::from_iterator(
            self.freqs.len(),
            self.freqs
                .iter()
                .zip(&self.phases)
                .map(|(w, p)| scale * (w[0] * x[0] + w[1] * x[1] + p).cos()),
        )
    }
}

struct ConditionTransform {
    matrix: DMatrix<f64>,
    bias: DVector<f64>,
    noise: f64,
}

impl ConditionTransform {
    fn new(spec: &ConditionSpec, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let lo = spec.offset.min(d);
        let hi = spec.affected.map_or(d, |a| lo + a).min(d);
        let mut matrix = DMatrix::identity(d, d);
        let (c, s) = (spec.rotation.cos(), spec.rotation.sin());
        for k in (lo..hi.saturating_sub(1)).step_by(2) {
            matrix[(k, k)] = c;
            matrix[(k, k + 1)] = -s;
            matrix[(k + 1, k)] = s;
            matrix[(k + 1, k + 1)] = c;
        }
        for k in lo..hi {
            for j in 0..d {
                matrix[(k, j)] *= spec.gain;
            }
        }
        let bias = DVector::from_iterator(
            d,
            (0..d).map(|k| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                if (lo..hi).contains(&k) {
                    sign * spec.bias
                } else {
                    0.0
                }
            }),
        );
        Self {
            matrix,
            bias,
            noise: spec.noise,
        }
    }
}

/// Generates one sample per (route location, condition), location-major.
///
/// Sample ids are `id_offset + k * n_conditions + c`. The descriptor field and
/// the condition transforms depend only on `seed`, so two configs sharing a
/// seed but differing in route describe the same world in different places.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let field = FourierField::new(cfg.d_in, cfg.length_scale, &mut world_rng);
    let transforms: Vec<ConditionTransform> = cfg
        .conditions
        .iter()
        .map(|c| ConditionTransform::new(c, cfg.d_in, &mut world_rng))
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed.unwrap_or(cfg.seed) ^ NOISE_SALT);

    let n_cond = cfg.conditions.len();
    let mut samples = Vec::with_capacity(cfg.n_locations * n_cond);
    let mut route = Vec::with_capacity(cfg.n_locations);
    for k in 0..cfg.n_locations {
        let (location, yaw) = cfg.route.point(k, cfg.n_locations);
        route.push(location);
        let base = field.eval(location);
        for (c, (spec, t)) in cfg.conditions.iter().zip(&transforms).enumerate() {
            let mut desc = &t.matrix * &base + &t.bias;
            if t.noise > 0.0 {
                for v in desc.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += t.noise * z;
                }
            }
            samples.push(GeoSample {
                id: cfg.id_offset + (k * n_cond + c) as u64,
                location,
                yaw,
                condition: spec.name.clone(),
                descriptor: desc.iter().copied().collect(),
            });
        }
    }
    Dataset::new(samples, Split::Train, Some(route))
}

const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Several drives over the same route merged into one dataset, ordered by
/// pass then location. Pass `k` draws its noise from seed `base + 100 + k`
/// (base is `noise_seed`, else `seed`) and its ids start at
/// `id_offset + k * n_locations * n_conditions`. Conditions named in `rare`
/// appear in the first pass only.
pub fn generate_passes(cfg: &SyntheticWorldConfig, passes: usize, rare: &[String]) -> Result<Dataset> {
    if passes == 0 {
        return Err(Error::Config("passes must be >= 1".into()));
    }
    let base = cfg.noise_seed.unwrap_or(cfg.seed);
    let per_pass = (cfg.n_locations * cfg.conditions.len()) as u64;
    let mut samples = Vec::new();
    let mut route = None;
    for pass in 0..passes {
        let pass_cfg = SyntheticWorldConfig {
            noise_seed: Some(base.wrapping_add(100 + pass as u64)),
            id_offset: cfg.id_offset + pass as u64 * per_pass,
            ..cfg.clone()
        };
        let world = generate_world(&pass_cfg)?;
        route = world.route_locations;
        samples.extend(
            world
                .samples
                .into_iter()
                .filter(|s| pass == 0 || !rare.contains(&s.condition)),
        );
    }
    Dataset::new(samples, Split::Train, route)
}

/// Returns a copy of `dataset` relabelled with `split`.
pub fn with_split(dataset: Dataset, split: Split) -> Dataset {
    Dataset { split, ..dataset }
}
