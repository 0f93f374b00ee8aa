//! Reference map construction and top-1 localization.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::geodata::{geo_distance, Dataset, Location};
use crate::parallel::par_map;
use crate::volume::sorted_eigen;

/// Components whose variance falls below this fraction of the leading one
/// cannot be whitened.
const MIN_RELATIVE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `dim × s`, one principal direction per row.
    pub components: Vec<Vec<f64>>,
    /// `1 / sqrt(variance)` per component.
    pub scales: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "pca expects dimension {}, got {}",
                self.input_dim(),
                f.len()
            )));
        }
        Ok(self
            .components
            .iter()
            .zip(&self.scales)
            .map(|(c, s)| {
                c.iter()
                    .zip(f.iter().zip(&self.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum::<f64>()
                    * s
            })
            .collect())
    }
}

/// Fits mean-centering, the top `dim` principal directions and per-component
/// whitening on the rows of `features`. Uses the unbiased covariance.
pub fn fit_pca(features: &[Vec<f64>], dim: usize) -> Result<PcaModel> {
    let n = features.len();
    let s = features.first().map_or(0, Vec::len);
    if n < 2 || dim == 0 || dim > s.min(n - 1) {
        return Err(Error::Contract(format!(
            "pca dim must lie in [1, min(n - 1, s)] = [1, {}], got {dim}",
            s.min(n.saturating_sub(1))
        )));
    }
    if features.iter().any(|f| f.len() != s) {
        return Err(Error::Shape("pca rows differ in length".into()));
    }
    let mut mean = vec![0.0; s];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, s, |i, j| features[i][j] - mean[j]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let (values, vectors) = sorted_eigen(cov);
    let lead = values[0].max(0.0);
    let mut components = Vec::with_capacity(dim);
    let mut scales = Vec::with_capacity(dim);
    for (k, &value) in values.iter().enumerate().take(dim) {
        if value.is_nan() || value <= MIN_RELATIVE_VARIANCE * lead {
            return Err(Error::Contract(format!(
                "pca component {k} has variance {value} and cannot be whitened"
            )));
        }
        let mut v: Vec<f64> = vectors.column(k).iter().copied().collect();
        // fix the sign so the largest entry is positive
        let big = v
            .iter()
            .copied()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        scales.push(1.0 / value.sqrt());
    }
    Ok(PcaModel {
        mean,
        components,
        scales,
    })
}

/// Greedy walk keeping a location when it is at least `spacing` from the
/// last kept one. Returns kept positions.
pub fn subsample_references(locations: &[Location], spacing: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, &x) in locations.iter().enumerate() {
        match kept.last() {
            Some(&last) if geo_distance(locations[last], x) < spacing => {}
            _ => kept.push(i),
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub id: u64,
    #[serde(rename = "x")]
    pub location: Location,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    /// Position in the map.
    pub entry: usize,
    pub id: u64,
    pub location: Location,
    /// Euclidean feature distance.
    pub distance: f64,
}

const MAP_FORMAT: &str = "voloc-map";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMap {
    format: String,
    version: u32,
    pub spacing: f64,
    pub pca: Option<PcaModel>,
    entries: Vec<MapEntry>,
}

impl ReferenceMap {
    pub fn new(entries: Vec<MapEntry>, pca: Option<PcaModel>, spacing: f64) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Validation("reference map has no entries".into()));
        };
        let dim = first.feature.len();
        if let Some(p) = &pca {
            if p.dim() != dim {
                return Err(Error::Shape(format!(
                    "pca output dimension {} but entries have {dim}",
                    p.dim()
                )));
            }
        }
        if entries.iter().any(|e| e.feature.len() != dim) {
            return Err(Error::Shape("map entries differ in dimension".into()));
        }
        Ok(Self {
            format: MAP_FORMAT.into(),
            version: MAP_VERSION,
            spacing,
            pca,
            entries,
        })
    }

    /// Embeds `references`, optionally fits PCA whitening to `dim`
    /// components on all of them, then subsamples by `spacing`.
    ///
    /// `dim` is capped at `min(s, n - 1)`.
    pub fn build(
        references: &Dataset,
        embedder: &Embedder,
        dim: Option<usize>,
        spacing: f64,
        threads: usize,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Validation("reference split is empty".into()));
        }
        if !(spacing.is_finite() && spacing >= 0.0) {
            return Err(Error::Config(format!("spacing must be >= 0, got {spacing}")));
        }
        let raw = embed_all(references, embedder, threads)?;
        let pca = match dim {
            Some(d) => {
                let cap = embedder.spec().s.min(references.len().saturating_sub(1));
                if d == 0 {
                    return Err(Error::Config("dim must be >= 1".into()));
                }
                if cap == 0 {
                    None
                } else {
                    Some(fit_pca(&raw, d.min(cap))?)
                }
            }
            None => None,
        };
        let kept = subsample_references(&references.locations(), spacing);
        let entries = kept
            .into_iter()
            .map(|i| {
                let s = &references.samples()[i];
                let feature = match &pca {
                    Some(p) => p.project(&raw[i])?,
                    None => raw[i].clone(),
                };
                Ok(MapEntry {
                    id: s.id,
                    location: s.location,
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, pca, spacing)
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dimension of stored features.
    pub fn dim(&self) -> usize {
        self.entries[0].feature.len()
    }

    pub fn locations(&self) -> Vec<Location> {
        self.entries.iter().map(|e| e.location).collect()
    }

    /// Applies the map's PCA (if any) to a raw embedded feature.
    pub fn prepare(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match &self.pca {
            Some(p) => p.project(raw),
            None => Ok(raw.to_vec()),
        }
    }

    /// Exact nearest entry to an already prepared query; ties go to the
    /// lowest id.
    pub fn nearest(&self, query: &[f64]) -> Result<Hit> {
        if query.len() != self.dim() {
            return Err(Error::Contract(format!(
                "query dimension {} does not match map dimension {}",
                query.len(),
                self.dim()
            )));
        }
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (k, e) in self.entries.iter().enumerate() {
            let mut d2 = 0.0;
            let mut abandoned = false;
            for (a, b) in e.feature.iter().zip(query) {
                d2 += (a - b) * (a - b);
                if d2 > best_d2 {
                    abandoned = true;
                    break;
                }
            }
            if abandoned {
                continue;
            }
            if d2 < best_d2 || (d2 == best_d2 && e.id < self.entries[best].id) {
                best = k;
                best_d2 = d2;
            }
        }
        let e = &self.entries[best];
        Ok(Hit {
            entry: best,
            id: e.id,
            location: e.location,
            distance: best_d2.sqrt(),
        })
    }

    /// Localizes a raw embedded query feature.
    pub fn localize(&self, raw: &[f64]) -> Result<Hit> {
        self.nearest(&self.prepare(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if map.format != MAP_FORMAT || map.version != MAP_VERSION {
            return Err(Error::Validation(format!(
                "unsupported map {} v{}",
                map.format, map.version
            )));
        }
        Self::new(map.entries, map.pca, map.spacing)
    }
}

/// Embeds every sample of `dataset`, in order.
pub fn embed_all(dataset: &Dataset, embedder: &Embedder, threads: usize) -> Result<Vec<Vec<f64>>> {
    par_map(dataset.samples(), threads, |s| {
        embedder
            .embed(&s.descriptor)
            .map(|f| f.iter().copied().collect())
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
        let n = rows.len();
        let d = rows[0].len();
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = m.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        c.tr_mul(&c) / (n as f64 - 1.0)
    }

    #[test]
    fn white_data_projects_orthogonally() {
        // four points with identity sample covariance in 2-D
        let k = (1.5f64).sqrt();
        let rows = vec![vec![k, 0.0], vec![-k, 0.0], vec![0.0, k], vec![0.0, -k]];
        let pca = fit_pca(&rows, 2).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r).unwrap()).collect();
        let cov = covariance(&out);
        assert!((cov - DMatrix::identity(2, 2)).abs().max() < 1e-6);
        for r in &rows {
            let p = pca.project(r).unwrap();
            let n0: f64 = r.iter().map(|x| x * x).sum();
            let n1: f64 = p.iter().map(|x| x * x).sum();
            assert!((n0 - n1).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_data_has_unit_variance() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let pca = fit_pca(&rows, 1).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r).unwrap()).collect();
        assert!((covariance(&out)[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(fit_pca(&rows, 2).is_err());
    }

    #[test]
    fn random_data_whitened() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mix = DMatrix::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0));
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let z = DVector::from_fn(32, |_, _| rng.random_range(-1.0..1.0));
                (&mix * z).iter().copied().collect()
            })
            .collect();
        let pca = fit_pca(&rows, 8).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r).unwrap()).collect();
        assert!((covariance(&out) - DMatrix::identity(8, 8)).abs().max() < 1e-6);
    }

    #[test]
    fn pca_dim_too_large() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(fit_pca(&rows, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn greedy_spacing_walk() {
        let locs: Vec<Location> = (0..10).map(|i| [i as f64, 0.0]).collect();
        assert_eq!(subsample_references(&locs, 0.0), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_references(&locs, 2.5), vec![0, 3, 6, 9]);
        assert_eq!(subsample_references(&locs[..1], 100.0), vec![0]);
    }

    fn map(points: &[(u64, [f64; 2])]) -> ReferenceMap {
        ReferenceMap::new(
            points
                .iter()
                .map(|&(id, f)| MapEntry {
                    id,
                    location: [id as f64, 0.0],
                    feature: f.to_vec(),
                })
                .collect(),
            None,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_and_ties() {
        let m = map(&[(5, [1.0, 0.0]), (2, [0.0, 1.0]), (3, [0.0, 1.0])]);
        let hit = m.nearest(&[1.0, 0.0]).unwrap();
        assert_eq!((hit.id, hit.distance), (5, 0.0));
        let hit = m.nearest(&[0.0, 1.0]).unwrap();
        assert_eq!(hit.id, 2);
        let hit = m.nearest(&[0.1, 0.9]).unwrap();
        assert_eq!(hit.id, 2);
        assert!(matches!(m.nearest(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_map_rejected() {
        assert!(ReferenceMap::new(vec![], None, 0.0).is_err());
    }

    #[test]
    fn map_roundtrip() {
        let m = map(&[(1, [0.25, -0.5]), (2, [0.1, 0.2])]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        m.save(&path).unwrap();
        assert_eq!(ReferenceMap::load(&path).unwrap(), m);
    }
}
