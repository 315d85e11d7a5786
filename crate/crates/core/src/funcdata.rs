//! Canonical data model for irregular, mixed-type multivariate functional
//! observations with one optional nested grouping layer.
//!
//! Observations live in long format: one scalar measurement per row,
//! indexed by (dimension, unit, optional group, time). Missing values are
//! represented by row absence, never by sentinel values. After
//! construction a dataset is immutable and internally canonicalized
//! (units naturally sorted, rows sorted by dimension/unit/time), so any
//! permutation of the input rows yields bit-identical downstream results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::families::Family;

#[derive(Debug, Error)]
pub enum FuncDataError {
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("non-finite response in rows {rows:?}")]
    NonFiniteY { rows: Vec<usize> },
    #[error("family-support violations ({family}, dimension {dim}) in rows {rows:?}")]
    FamilySupport {
        family: &'static str,
        dim: usize,
        rows: Vec<usize>,
    },
    #[error("row {row}: dimension index {dim} exceeds K = {k}")]
    DimOutOfRange { row: usize, dim: usize, k: usize },
    #[error("row {row}: time {t} outside the declared domain [{lo}, {hi}]")]
    TimeOutsideDomain { row: usize, t: f64, lo: f64, hi: f64 },
    #[error("unit `{unit}` is assigned to more than one group")]
    GroupNesting { unit: String },
    #[error("unit `{unit}` mixes grouped and ungrouped rows")]
    GroupPartial { unit: String },
    #[error("family tags ({given}) must match the dimension count K = {k}")]
    FamilyCount { given: usize, k: usize },
    #[error("(dim {dim}, unit `{unit}`) is not observed on the full dense grid")]
    NotDenseGrid { dim: usize, unit: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Closed domain interval shared by all dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "interval must have positive length");
        Interval { lo, hi }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo - 1e-12 && t <= self.hi + 1e-12
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    /// `n` equidistant points covering the interval.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2);
        (0..n)
            .map(|i| self.lo + self.len() * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// One scalar measurement in the long format.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarObservation {
    /// Dimension index, 1-based as in the CSV format.
    pub dim: usize,
    pub unit: String,
    pub group: Option<String>,
    pub t: f64,
    pub y: f64,
}

/// Internal observation with interned unit index and 0-based dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs {
    pub dim: usize,
    pub unit: usize,
    pub t: f64,
    pub y: f64,
}

/// Sampling regimes of the reference simulation design.
///
/// Sparse retains 1..=10 dense-grid points per (dimension, unit),
/// irregular 11..=20, and regular exactly the eleven points {0, 0.1, .., 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingRegime {
    Sparse,
    Regular,
    Irregular,
}

impl SamplingRegime {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingRegime::Sparse => "sparse",
            SamplingRegime::Regular => "regular",
            SamplingRegime::Irregular => "irregular",
        }
    }
}

/// Column-name mapping for long-format CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub dim: String,
    pub unit: String,
    pub group: String,
    pub t: String,
    pub y: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            dim: "dim".into(),
            unit: "unit".into(),
            group: "group".into(),
            t: "t".into(),
            y: "y".into(),
        }
    }
}

/// Immutable multivariate functional dataset.
#[derive(Debug, Clone)]
pub struct MultivariateFunctionalDataset {
    k: usize,
    domain: Interval,
    families: Vec<Family>,
    units: Vec<String>,
    groups: Vec<String>,
    unit_group: Vec<Option<usize>>,
    obs: Vec<Obs>,
    dim_offsets: Vec<usize>,
}

/// Natural id ordering: numeric ids sort numerically, everything else
/// lexicographically after the numeric block.
fn id_key(id: &str) -> (bool, i64, String) {
    match id.parse::<i64>() {
        Ok(v) => (false, v, String::new()),
        Err(_) => (true, 0, id.to_string()),
    }
}

impl MultivariateFunctionalDataset {
    /// Validate and canonicalize a set of scalar observations.
    pub fn new(
        k: usize,
        domain: Interval,
        families: Vec<Family>,
        observations: &[ScalarObservation],
    ) -> Result<Self, FuncDataError> {
        if families.len() != k {
            return Err(FuncDataError::FamilyCount {
                given: families.len(),
                k,
            });
        }

        let mut nonfinite = Vec::new();
        let mut support: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, o) in observations.iter().enumerate() {
            if o.dim == 0 || o.dim > k {
                return Err(FuncDataError::DimOutOfRange {
                    row,
                    dim: o.dim,
                    k,
                });
            }
            if !domain.contains(o.t) {
                return Err(FuncDataError::TimeOutsideDomain {
                    row,
                    t: o.t,
                    lo: domain.lo,
                    hi: domain.hi,
                });
            }
            if !o.y.is_finite() {
                nonfinite.push(row);
            } else if families[o.dim - 1].check_support(o.y).is_err() {
                support.entry(o.dim).or_default().push(row);
            }
        }
        if !nonfinite.is_empty() {
            return Err(FuncDataError::NonFiniteY { rows: nonfinite });
        }
        if let Some((&dim, rows)) = support.iter().next() {
            return Err(FuncDataError::FamilySupport {
                family: families[dim - 1].name(),
                dim,
                rows: rows.clone(),
            });
        }

        // intern unit and group ids in natural order
        let mut units: Vec<String> = observations.iter().map(|o| o.unit.clone()).collect();
        units.sort_by_key(|u| id_key(u));
        units.dedup();
        let unit_index: BTreeMap<&str, usize> = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();

        let mut groups: Vec<String> = observations
            .iter()
            .filter_map(|o| o.group.clone())
            .collect();
        groups.sort_by_key(|g| id_key(g));
        groups.dedup();
        let group_index: BTreeMap<&str, usize> = groups
            .iter()
            .enumerate()
            .map(|(g, name)| (name.as_str(), g))
            .collect();

        // nesting: each unit maps to exactly one group, or to none at all
        let mut unit_group: Vec<Option<Option<usize>>> = vec![None; units.len()];
        for o in observations {
            let ui = unit_index[o.unit.as_str()];
            let gi = o.group.as_deref().map(|g| group_index[g]);
            match &unit_group[ui] {
                None => unit_group[ui] = Some(gi),
                Some(prev) if *prev == gi => {}
                Some(prev) => {
                    return Err(if prev.is_none() || gi.is_none() {
                        FuncDataError::GroupPartial {
                            unit: o.unit.clone(),
                        }
                    } else {
                        FuncDataError::GroupNesting {
                            unit: o.unit.clone(),
                        }
                    });
                }
            }
        }
        let unit_group: Vec<Option<usize>> = unit_group.into_iter().map(|g| g.flatten()).collect();
        if !groups.is_empty() && unit_group.iter().any(|g| g.is_none()) {
            let unit = units[unit_group.iter().position(|g| g.is_none()).unwrap()].clone();
            return Err(FuncDataError::GroupPartial { unit });
        }

        let mut obs: Vec<Obs> = observations
            .iter()
            .map(|o| Obs {
                dim: o.dim - 1,
                unit: unit_index[o.unit.as_str()],
                t: o.t,
                y: o.y,
            })
            .collect();
        obs.sort_by(|a, b| {
            (a.dim, a.unit)
                .cmp(&(b.dim, b.unit))
                .then(a.t.total_cmp(&b.t))
                .then(a.y.total_cmp(&b.y))
        });

        let mut dim_offsets = vec![0usize; k + 1];
        for o in &obs {
            dim_offsets[o.dim + 1] += 1;
        }
        for d in 0..k {
            dim_offsets[d + 1] += dim_offsets[d];
        }

        Ok(MultivariateFunctionalDataset {
            k,
            domain,
            families,
            units,
            groups,
            unit_group,
            obs,
            dim_offsets,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn family(&self, dim: usize) -> Family {
        self.families[dim]
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.units
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u == id)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_ids(&self) -> &[String] {
        &self.groups
    }

    /// Number of latent grouping layers: 1 for per-unit processes only,
    /// 2 when the optional nested layer is present.
    pub fn layers(&self) -> usize {
        if self.groups.is_empty() {
            1
        } else {
            2
        }
    }

    pub fn unit_group(&self, unit: usize) -> Option<usize> {
        self.unit_group[unit]
    }

    /// All observations in canonical order (sorted by dim, unit, t).
    pub fn observations(&self) -> &[Obs] {
        &self.obs
    }

    /// Observations of one dimension (0-based) as a contiguous slice.
    pub fn dim_observations(&self, dim: usize) -> &[Obs] {
        &self.obs[self.dim_offsets[dim]..self.dim_offsets[dim + 1]]
    }

    /// Reconstruct the public long-format rows (canonical order).
    pub fn to_rows(&self) -> Vec<ScalarObservation> {
        self.obs
            .iter()
            .map(|o| ScalarObservation {
                dim: o.dim + 1,
                unit: self.units[o.unit].clone(),
                group: self.unit_group[o.unit].map(|g| self.groups[g].clone()),
                t: o.t,
                y: o.y,
            })
            .collect()
    }

    /// Restrict the dataset to a single dimension (0-based), producing a
    /// univariate dataset with K = 1.
    pub fn dim_view(&self, dim: usize) -> MultivariateFunctionalDataset {
        let rows: Vec<ScalarObservation> = self
            .dim_observations(dim)
            .iter()
            .map(|o| ScalarObservation {
                dim: 1,
                unit: self.units[o.unit].clone(),
                group: self.unit_group[o.unit].map(|g| self.groups[g].clone()),
                t: o.t,
                y: o.y,
            })
            .collect();
        MultivariateFunctionalDataset::new(1, self.domain, vec![self.families[dim]], &rows)
            .expect("a valid dataset restricts to a valid dimension view")
    }
}

/// Read a long-format CSV (`dim,unit,group,t,y`, group may be empty).
pub fn load_long_csv(
    path: &Path,
    schema: &ColumnSchema,
    domain: Interval,
    family_tags: &[Family],
) -> Result<MultivariateFunctionalDataset, FuncDataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };
    let required = |name: &str| -> Result<usize, FuncDataError> {
        col(name).ok_or_else(|| FuncDataError::MissingColumn(name.to_string()))
    };
    let (ci_dim, ci_unit, ci_t, ci_y) = (
        required(&schema.dim)?,
        required(&schema.unit)?,
        required(&schema.t)?,
        required(&schema.y)?,
    );
    let ci_group = col(&schema.group);

    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_f64 = |i: usize, what: &str| -> Result<f64, FuncDataError> {
            field(i).parse::<f64>().map_err(|_| FuncDataError::Row {
                row,
                message: format!("cannot parse {what} value `{}`", field(i)),
            })
        };
        let dim = field(ci_dim)
            .parse::<usize>()
            .map_err(|_| FuncDataError::Row {
                row,
                message: format!("cannot parse dim value `{}`", field(ci_dim)),
            })?;
        let group = ci_group.and_then(|i| {
            let g = field(i);
            if g.is_empty() {
                None
            } else {
                Some(g.to_string())
            }
        });
        rows.push(ScalarObservation {
            dim,
            unit: field(ci_unit).to_string(),
            group,
            t: parse_f64(ci_t, "t")?,
            y: parse_f64(ci_y, "y")?,
        });
    }
    MultivariateFunctionalDataset::new(family_tags.len(), domain, family_tags.to_vec(), &rows)
}

/// Write the canonical long format (`dim,unit,group,t,y`).
pub fn write_long_csv(
    dataset: &MultivariateFunctionalDataset,
    path: &Path,
) -> Result<(), FuncDataError> {
    let mut out = String::from("dim,unit,group,t,y\n");
    for row in dataset.to_rows() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.dim,
            row.unit,
            row.group.as_deref().unwrap_or(""),
            row.t,
            row.y
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Length of the dense simulation grid.
pub const DENSE_GRID_LEN: usize = 101;

/// Subsample a dense dataset (every (dim, unit) observed on the equidistant
/// 101-point grid) according to a sampling regime. Deterministic given the
/// generator state.
pub fn subsample_regime<R: Rng>(
    dense: &MultivariateFunctionalDataset,
    regime: SamplingRegime,
    rng: &mut R,
) -> Result<MultivariateFunctionalDataset, FuncDataError> {
    let grid = dense.domain().grid(DENSE_GRID_LEN);
    let grid_pos = |t: f64| -> Option<usize> {
        let x = (t - dense.domain().lo) / dense.domain().len() * (DENSE_GRID_LEN - 1) as f64;
        let i = x.round() as usize;
        (i < DENSE_GRID_LEN && (grid[i] - t).abs() < 1e-9 * (1.0 + dense.domain().len()))
            .then_some(i)
    };

    // per (dim, unit): the dense rows indexed by grid position
    let mut per_cell: Vec<Vec<Option<&Obs>>> =
        vec![vec![None; DENSE_GRID_LEN]; dense.k() * dense.n_units()];
    for o in dense.observations() {
        let pos = grid_pos(o.t).ok_or_else(|| FuncDataError::NotDenseGrid {
            dim: o.dim + 1,
            unit: dense.unit_ids()[o.unit].clone(),
        })?;
        per_cell[o.dim * dense.n_units() + o.unit][pos] = Some(o);
    }

    let mut kept = Vec::new();
    for dim in 0..dense.k() {
        for unit in 0..dense.n_units() {
            let cell = &per_cell[dim * dense.n_units() + unit];
            if cell.iter().any(|slot| slot.is_none()) {
                return Err(FuncDataError::NotDenseGrid {
                    dim: dim + 1,
                    unit: dense.unit_ids()[unit].clone(),
                });
            }
            let mut indices: Vec<usize> = match regime {
                SamplingRegime::Regular => (0..11).map(|i| i * 10).collect(),
                SamplingRegime::Sparse => {
                    let n = rng.gen_range(1..=10);
                    sample_indices(rng, DENSE_GRID_LEN, n).into_vec()
                }
                SamplingRegime::Irregular => {
                    let n = rng.gen_range(11..=20);
                    sample_indices(rng, DENSE_GRID_LEN, n).into_vec()
                }
            };
            indices.sort_unstable();
            for i in indices {
                let o = cell[i].unwrap();
                kept.push(ScalarObservation {
                    dim: o.dim + 1,
                    unit: dense.unit_ids()[o.unit].clone(),
                    group: dense
                        .unit_group(o.unit)
                        .map(|g| dense.group_ids()[g].clone()),
                    t: o.t,
                    y: o.y,
                });
            }
        }
    }
    MultivariateFunctionalDataset::new(
        dense.k(),
        dense.domain(),
        dense.families().to_vec(),
        &kept,
    )
}

/// Per-unit scalar covariates, keyed by unit id.
#[derive(Debug, Clone, Default)]
pub struct CovariateTable {
    names: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
}

impl CovariateTable {
    pub fn new(names: Vec<String>) -> Self {
        CovariateTable {
            names,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, unit: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.names.len());
        self.rows.insert(unit.to_string(), values);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, unit: &str, name: &str) -> Option<f64> {
        let idx = self.names.iter().position(|n| n == name)?;
        self.rows.get(unit).map(|vals| vals[idx])
    }

    /// Read a wide CSV with a `unit` column plus one column per covariate.
    pub fn load_csv(path: &Path) -> Result<Self, FuncDataError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let unit_col = headers
            .iter()
            .position(|h| h == "unit")
            .ok_or_else(|| FuncDataError::MissingColumn("unit".into()))?;
        let names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != unit_col)
            .map(|(_, h)| h.to_string())
            .collect();
        let mut table = CovariateTable::new(names);
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let unit = record.get(unit_col).unwrap_or("").to_string();
            let mut values = Vec::new();
            for (i, field) in record.iter().enumerate() {
                if i == unit_col {
                    continue;
                }
                values.push(field.parse::<f64>().map_err(|_| FuncDataError::Row {
                    row,
                    message: format!("cannot parse covariate value `{field}`"),
                })?);
            }
            table.rows.insert(unit, values);
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FuncDataError> {
        let mut out = String::from("unit");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (unit, values) in &self.rows {
            out.push_str(unit);
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}
