//! Synthetic unit-sphere datasets and their CSV persistence.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Tolerance on `‖x_i‖₂ = 1`.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Diameter of the unit sphere; no separation at or above it is achievable.
pub const MAX_SEPARATION: f64 = 2.0;

/// Training inputs (one row per point), labels and an optional test point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_test: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, x_test: Option<DVector<f64>>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if let Some(t) = &x_test {
            if t.len() != x.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "dataset test point",
                    expected: x.ncols(),
                    found: t.len(),
                });
            }
        }
        Ok(Self { x, y, x_test })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// The test point, or a domain error when the dataset has none.
    pub fn test_point(&self) -> Result<&DVector<f64>> {
        self.x_test
            .as_ref()
            .ok_or_else(|| Error::Domain("dataset has no test point".into()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.d()).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the test point sidecar (`x_0,...,x_{d-1}` header, one row).
    pub fn write_test_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let t = self.test_point()?;
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.d()).map(|j| format!("x_{j}")).collect();
        w.write_record(&header)?;
        w.write_record(t.iter().map(|v| fmt_f64(*v)))?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, test_path: Option<&Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 2 {
            return Err(Error::Domain(
                "dataset CSV needs at least one input column and y".into(),
            ));
        }
        let d = width - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = parse_record(&rec)?;
            xs.extend_from_slice(&vals[..d]);
            ys.push(vals[d]);
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, d, &xs);
        let x_test = match test_path {
            Some(p) => {
                let mut r = csv::Reader::from_path(p)?;
                let rec = r
                    .records()
                    .next()
                    .ok_or_else(|| Error::Domain("empty test point CSV".into()))??;
                Some(DVector::from_vec(parse_record(&rec)?))
            }
            None => None,
        };
        Dataset::new(x, DVector::from_vec(ys), x_test)
    }
}

fn parse_record(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Domain(format!("bad number `{s}`: {e}")))
        })
        .collect()
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A point drawn uniformly from the unit sphere in `R^d`.
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        // redraw the (probability-zero) zero vector
        if norm > 1e-300 {
            return v / norm;
        }
    }
}

/// Draws `n` unit-norm rows with pairwise distance at least `delta_sep`,
/// labels uniform in `[-1, 1]` and a unit-norm test point.
///
/// A row that lands too close to an earlier row is redrawn on its own; the
/// request fails after `1000·n` redraws in total.
pub fn generate_dataset(n: usize, d: usize, seed: SeedStream, delta_sep: f64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if d < 2 {
        return Err(Error::config("d", "must be at least 2"));
    }
    if !(delta_sep > 0.0 && delta_sep < MAX_SEPARATION) {
        return Err(Error::config("delta_sep", "must lie in (0, 2)"));
    }
    let mut rng = seed.rng();
    let budget = 1000 * n;
    let mut rejections = 0usize;
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let cand = sample_unit_sphere(d, &mut rng);
        if rows.iter().all(|r| (r - &cand).norm() >= delta_sep) {
            rows.push(cand);
        } else {
            rejections += 1;
            if rejections >= budget {
                return Err(Error::Infeasible(format!(
                    "could not place {n} points in d={d} with separation {delta_sep} after {budget} rejections"
                )));
            }
        }
    }
    let labels = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let y = DVector::from_iterator(n, (0..n).map(|_| rng.sample(labels)));
    let x_test = sample_unit_sphere(d, &mut rng);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    Dataset::new(x, y, Some(x_test))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowNorm {
        row: usize,
        norm: f64,
    },
    TestNorm {
        norm: f64,
    },
    Label {
        row: usize,
        value: f64,
    },
    Separation {
        first: usize,
        second: usize,
        distance: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowNorm { row, norm } => write!(f, "row {row} has norm {norm}"),
            Violation::TestNorm { norm } => write!(f, "test point has norm {norm}"),
            Violation::Label { row, value } => write!(f, "label {row} = {value} out of range"),
            Violation::Separation {
                first,
                second,
                distance,
            } => write!(f, "rows {first} and {second} are {distance} apart"),
        }
    }
}

/// Checks the dataset invariants with the default label bound `|y| ≤ 1`.
pub fn validate_dataset(ds: &Dataset, delta_sep: f64) -> Vec<Violation> {
    validate_dataset_with(ds, delta_sep, 1.0)
}

pub fn validate_dataset_with(ds: &Dataset, delta_sep: f64, y_max: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..ds.n() {
        let norm = ds.x.row(i).norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            out.push(Violation::RowNorm { row: i, norm });
        }
        if !(ds.y[i].abs() <= y_max) {
            out.push(Violation::Label {
                row: i,
                value: ds.y[i],
            });
        }
    }
    if let Some(t) = &ds.x_test {
        let norm = t.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            out.push(Violation::TestNorm { norm });
        }
    }
    for i in 0..ds.n() {
        for j in (i + 1)..ds.n() {
            let distance = (ds.x.row(i) - ds.x.row(j)).norm();
            if distance < delta_sep {
                out.push(Violation::Separation {
                    first: i,
                    second: j,
                    distance,
                });
            }
        }
    }
    out
}

/// Domain check used by the kernel and network routines.
pub(crate) fn check_unit_rows(x: &DMatrix<f64>, what: &str) -> Result<()> {
    for (i, row) in x.row_iter().enumerate() {
        let norm = row.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Domain(format!(
                "{what} row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_unit_vector(v: &DVector<f64>, what: &str) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Domain(format!("{what} has norm {norm}, expected 1")));
    }
    Ok(())
}
