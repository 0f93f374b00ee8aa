//! Localization accuracy, geometric upper bound, sweeps and report output.
//!
//! A query counts as localized at threshold `d` when its top-1 retrieved
//! reference lies strictly closer than `d` to the true query location. The
//! upper bound applies the same test to the geometrically nearest reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::geodata::{geo_distance, Dataset, Location};
use crate::parallel::par_map;
use crate::retrieval::{embed_all, ReferenceMap};
use crate::spatial::GridIndex;

/// Label of the row aggregating every condition.
pub const ALL_CONDITIONS: &str = "all";

pub const CSV_HEADER: &str = "condition,dim,spacing,threshold,accuracy,upper_bound,n_queries";

/// Per-query retrieval result, independent of any threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: u64,
    pub condition: String,
    /// Distance from the query to its retrieved reference.
    pub retrieved_error: f64,
    /// Distance from the query to the geometrically nearest reference.
    pub nearest_error: f64,
}

/// Localizes every raw query feature against `map`.
pub fn outcomes_from_features(
    map: &ReferenceMap,
    queries: &Dataset,
    features: &[Vec<f64>],
    threads: usize,
) -> Result<Vec<QueryOutcome>> {
    if queries.is_empty() {
        return Err(Error::Contract("query set is empty".into()));
    }
    let grid = GridIndex::new(&map.locations(), 10.0);
    let items: Vec<usize> = (0..queries.len()).collect();
    par_map(&items, threads, |&i| {
        let q = &queries.samples()[i];
        let hit = map.localize(&features[i])?;
        let nearest = grid.nearest(q.location).expect("map is non-empty");
        Ok(QueryOutcome {
            id: q.id,
            condition: q.condition.clone(),
            retrieved_error: geo_distance(hit.location, q.location),
            nearest_error: geo_distance(grid.location(nearest), q.location),
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate_queries(
    map: &ReferenceMap,
    queries: &Dataset,
    embedder: &Embedder,
    threads: usize,
) -> Result<Vec<QueryOutcome>> {
    let features = embed_all(queries, embedder, threads)?;
    outcomes_from_features(map, queries, &features, threads)
}

fn fraction(outcomes: &[QueryOutcome], d: f64, pick: fn(&QueryOutcome) -> f64) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Contract("query set is empty".into()));
    }
    let hits = outcomes.iter().filter(|o| pick(o) < d).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

pub fn accuracy(outcomes: &[QueryOutcome], d: f64) -> Result<f64> {
    fraction(outcomes, d, |o| o.retrieved_error)
}

pub fn upper_bound(outcomes: &[QueryOutcome], d: f64) -> Result<f64> {
    fraction(outcomes, d, |o| o.nearest_error)
}

/// Upper bound straight from geometry, without a map.
pub fn geometric_upper_bound(references: &[Location], queries: &[Location], d: f64) -> Result<f64> {
    if queries.is_empty() || references.is_empty() {
        return Err(Error::Contract("empty query or reference set".into()));
    }
    let grid = GridIndex::new(references, d.max(1.0));
    let hits = queries
        .iter()
        .filter(|&&q| {
            let n = grid.nearest(q).expect("non-empty");
            geo_distance(grid.location(n), q) < d
        })
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub dim: usize,
    pub spacing: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub upper_bound: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Rows for one (dim, spacing) cell: the aggregate first, then each
    /// condition in name order, every threshold in the given order.
    pub fn from_outcomes(
        outcomes: &[QueryOutcome],
        dim: usize,
        spacing: f64,
        thresholds: &[f64],
    ) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<QueryOutcome>> = BTreeMap::new();
        for o in outcomes {
            groups.entry(&o.condition).or_default().push(o.clone());
        }
        let mut rows = Vec::new();
        let all = std::iter::once((ALL_CONDITIONS, outcomes.to_vec()));
        for (condition, group) in all.chain(groups) {
            for &threshold in thresholds {
                rows.push(ReportRow {
                    condition: condition.to_string(),
                    dim,
                    spacing,
                    threshold,
                    accuracy: accuracy(&group, threshold)?,
                    upper_bound: upper_bound(&group, threshold)?,
                    n_queries: group.len(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.condition) {
                out.push(r.condition.clone());
            }
        }
        out
    }

    pub fn find(&self, condition: &str, dim: usize, spacing: f64, threshold: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.condition == condition && r.dim == dim && r.spacing == spacing && r.threshold == threshold
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{}",
                r.condition, r.dim, r.spacing, r.threshold, r.accuracy, r.upper_bound, r.n_queries
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub thresholds: Vec<f64>,
    /// Requested PCA dimensions, each capped at what the references allow.
    pub dims: Vec<usize>,
    pub spacings: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            thresholds: vec![10.0],
            dims: vec![256],
            spacings: vec![0.0],
        }
    }
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.thresholds.is_empty() || self.dims.is_empty() || self.spacings.is_empty() {
            return bad("sweep axes must be non-empty");
        }
        if self.thresholds.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("thresholds must be finite and > 0");
        }
        if self.dims.contains(&0) {
            return bad("dims must be >= 1");
        }
        if self.spacings.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("spacings must be finite and >= 0");
        }
        Ok(())
    }
}

/// Cartesian evaluation over dims × spacings × thresholds. Query features are
/// embedded once and reused for every map.
pub fn sweep(
    references: &Dataset,
    queries: &Dataset,
    embedder: &Embedder,
    axes: &SweepAxes,
    threads: usize,
) -> Result<EvalReport> {
    axes.validate()?;
    let features = embed_all(queries, embedder, threads)?;
    let mut report = EvalReport::default();
    for &dim in &axes.dims {
        for &spacing in &axes.spacings {
            let map = ReferenceMap::build(references, embedder, Some(dim), spacing, threads)?;
            let outcomes = outcomes_from_features(&map, queries, &features, threads)?;
            let cell = EvalReport::from_outcomes(&outcomes, map.dim(), spacing, &axes.thresholds)?;
            report.rows.extend(cell.rows);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Threshold,
    Dim,
    Spacing,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Threshold => "threshold",
            Axis::Dim => "dim",
            Axis::Spacing => "spacing",
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of accuracy against one axis, other axes held at their first
/// value in the report. The aggregate upper bound is drawn dashed.
pub fn plot_svg(report: &EvalReport, axis: Axis) -> String {
    let first = report.rows.first();
    let (d0, l0, t0) = first.map_or((0, 0.0, 0.0), |r| (r.dim, r.spacing, r.threshold));
    let x_of = |r: &ReportRow| match axis {
        Axis::Threshold => r.threshold,
        Axis::Dim => r.dim as f64,
        Axis::Spacing => r.spacing,
    };
    let on_slice = |r: &ReportRow| match axis {
        Axis::Threshold => r.dim == d0 && r.spacing == l0,
        Axis::Dim => r.spacing == l0 && r.threshold == t0,
        Axis::Spacing => r.dim == d0 && r.threshold == t0,
    };
    let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| on_slice(r)).collect();
    let xs: Vec<f64> = rows.iter().map(|r| x_of(r)).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let (w, h, m) = (480.0, 320.0, 48.0);
    let px = |x: f64| m + (x - lo) / span * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<path d="M{m} {} L{m} {} L{} {}" fill="none" stroke="#000000"/>"##,
        m,
        h - m,
        w - m,
        h - m
    );
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            m - 4.0,
            py(y) + 4.0,
            y
        );
    }
    let mut ticks = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in &ticks {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(*x),
            h - m + 14.0,
            x
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 8.0,
        axis.name()
    );

    let line = |pts: &[(f64, f64)]| {
        pts.iter()
            .enumerate()
            .map(|(i, (x, y))| format!("{}{:.1} {:.1}", if i == 0 { "M" } else { " L" }, px(*x), py(*y)))
            .collect::<String>()
    };
    for (k, cond) in report.conditions().iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.condition == cond)
            .map(|r| (x_of(r), r.accuracy))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line(&pts)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{cond}</text>"#,
            w - m + 4.0 - 40.0,
            m + 14.0 * k as f64
        );
        if cond == ALL_CONDITIONS {
            let mut ub: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| &r.condition == cond)
                .map(|r| (x_of(r), r.upper_bound))
                .collect();
            ub.sort_by(|a, b| a.0.total_cmp(&b.0));
            let _ = writeln!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-dasharray="4 3"/>"#,
                line(&ub)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
