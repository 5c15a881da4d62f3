//! Point-referenced spatio-temporal observations: the data model, delimited
//! text ingestion, and train/validation splitting.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// A 2-D spatial coordinate plus a time coordinate; the index set of every
/// process in this crate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpaceTimePoint {
    pub s1: f64,
    pub s2: f64,
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(s1: f64, s2: f64, t: f64) -> Self {
        Self { s1, s2, t }
    }

    pub fn is_finite(&self) -> bool {
        self.s1.is_finite() && self.s2.is_finite() && self.t.is_finite()
    }

    /// Coordinates scaled for space-time distance: `(s1, s2, time_scale * t)`.
    pub fn scaled(&self, time_scale: f64) -> [f64; 3] {
        [self.s1, self.s2, time_scale * self.t]
    }
}

/// Observations `z` at `points`, with an optional `n x q` covariate matrix.
/// `q = 0` is permitted (zero-mean model). Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Vec<SpaceTimePoint>,
    pub z: Vec<f64>,
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(points: Vec<SpaceTimePoint>, z: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        if points.len() != z.len() || x.nrows() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "inconsistent lengths: {} points, {} observations, {} covariate rows",
                points.len(),
                z.len(),
                x.nrows()
            )));
        }
        for (row, p) in points.iter().enumerate() {
            if !p.is_finite() || !z[row].is_finite() {
                return Err(Error::NonFinite { row: row + 1 });
            }
        }
        check_duplicates(&points)?;
        Ok(Self { points, z, x })
    }

    /// Zero-covariate dataset.
    pub fn without_covariates(points: Vec<SpaceTimePoint>, z: Vec<f64>) -> Result<Self> {
        let n = points.len();
        Self::new(points, z, DMatrix::zeros(n, 0))
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let z = indices.iter().map(|&i| self.z[i]).collect();
        let x = DMatrix::from_fn(indices.len(), self.q(), |r, c| self.x[(indices[r], c)]);
        Self { points, z, x }
    }
}

fn coord_key(p: &SpaceTimePoint) -> (u64, u64, u64) {
    (p.s1.to_bits(), p.s2.to_bits(), p.t.to_bits())
}

fn check_duplicates(points: &[SpaceTimePoint]) -> Result<()> {
    let mut seen: HashMap<(u64, u64, u64), usize> = HashMap::with_capacity(points.len());
    for (row, p) in points.iter().enumerate() {
        if let Some(first) = seen.insert(coord_key(p), row) {
            return Err(Error::DuplicateCoordinates {
                row: row + 1,
                first_row: first + 1,
            });
        }
    }
    Ok(())
}

/// Column-name mapping for delimited text files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    pub s1: String,
    pub s2: String,
    pub t: String,
    pub z: String,
    /// Explicit covariate columns; `None` auto-detects headers `x1, x2, ...`.
    pub covariates: Option<Vec<String>>,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            s1: "s1".into(),
            s2: "s2".into(),
            t: "t".into(),
            z: "z".into(),
            covariates: None,
            delimiter: b',',
        }
    }
}

/// Loads a delimited text file with a header row into a [`Dataset`].
///
/// Rows keep file order. Errors name the offending row (1-based, excluding
/// the header) and column.
pub fn load_dataset<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_reader(file);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_s1 = col(&schema.s1)?;
    let c_s2 = col(&schema.s2)?;
    let c_t = col(&schema.t)?;
    let c_z = col(&schema.z)?;

    let cov_names: Vec<String> = match &schema.covariates {
        Some(list) => list.clone(),
        None => {
            // x1, x2, ... in numeric order for as long as they exist.
            let mut names = Vec::new();
            for k in 1.. {
                let name = format!("x{k}");
                if headers.iter().any(|h| *h == name) {
                    names.push(name);
                } else {
                    break;
                }
            }
            names
        }
    };
    let c_cov: Vec<usize> = cov_names
        .iter()
        .map(|name| col(name))
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    let mut z = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        let parse = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        points.push(SpaceTimePoint::new(
            parse(c_s1, &schema.s1)?,
            parse(c_s2, &schema.s2)?,
            parse(c_t, &schema.t)?,
        ));
        z.push(parse(c_z, &schema.z)?);
        for (c, name) in c_cov.iter().zip(&cov_names) {
            xs.push(parse(*c, name)?);
        }
    }

    let n = points.len();
    let q = c_cov.len();
    let x = DMatrix::from_fn(n, q, |r, c| xs[r * q + c]);
    Dataset::new(points, z, x)
}

/// Writes a dataset back out in the same schema. Values print in shortest
/// round-trip form, so load -> save -> load is bit-identical for finite doubles.
pub fn save_dataset<P: AsRef<Path>>(path: P, data: &Dataset, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_writer(file);

    let mut header = vec![
        schema.s1.clone(),
        schema.s2.clone(),
        schema.t.clone(),
        schema.z.clone(),
    ];
    let cov_names: Vec<String> = match &schema.covariates {
        Some(list) => list.clone(),
        None => (1..=data.q()).map(|k| format!("x{k}")).collect(),
    };
    header.extend(cov_names.iter().cloned());
    writer.write_record(&header)?;

    for i in 0..data.n() {
        let p = &data.points[i];
        let mut record = vec![
            p.s1.to_string(),
            p.s2.to_string(),
            p.t.to_string(),
            data.z[i].to_string(),
        ];
        for c in 0..data.q() {
            record.push(data.x[(i, c)].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Disjoint uniform-random partition into (training, validation) with
/// training size `round(fraction * n)`. Deterministic given `seed`; row order
/// within each part follows the input.
pub fn split_train_validation(
    data: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if data.n() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 observations to split".into(),
        ));
    }
    let n = data.n();
    let n_train = (fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = indices[..n_train].to_vec();
    let mut valid_idx: Vec<usize> = indices[n_train..].to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&valid_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_minimal_file() {
        let f = write_tmp("s1,s2,t,z\n0.0,0.0,0.0,1.5\n0.1,0.0,0.0,2.5\n0.2,0.0,0.0,3.5\n");
        let d = load_dataset(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.q(), 0);
        assert_eq!(d.z, vec![1.5, 2.5, 3.5]);
    }

    #[test]
    fn detects_covariate_column() {
        let f = write_tmp("s1,s2,t,z,x1\n0.0,0.0,0.0,1.5,1.0\n0.1,0.0,0.0,2.5,2.0\n");
        let d = load_dataset(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.q(), 1);
        assert_eq!(d.x[(1, 0)], 2.0);
    }

    #[test]
    fn duplicate_coordinates_name_the_row() {
        let f = write_tmp("s1,s2,t,z\n0.0,0.0,0.0,1.0\n0.1,0.0,0.0,2.0\n0.0,0.0,0.0,3.0\n");
        let err = load_dataset(f.path(), &CsvSchema::default()).unwrap_err();
        match err {
            Error::DuplicateCoordinates { row, first_row } => {
                assert_eq!(row, 3);
                assert_eq!(first_row, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let f = write_tmp("s1,s2,z\n0.0,0.0,1.0\n");
        assert!(matches!(
            load_dataset(f.path(), &CsvSchema::default()),
            Err(Error::MissingColumn(c)) if c == "t"
        ));
        let f = write_tmp("s1,s2,t,z\n0.0,abc,0.0,1.0\n");
        match load_dataset(f.path(), &CsvSchema::default()).unwrap_err() {
            Error::NonNumeric { row, column, value } => {
                assert_eq!(row, 1);
                assert_eq!(column, "s2");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_sizes_match_paper_counts() {
        // 51 x 51 x 10 grid subsampled at 80%.
        let n = 26_010usize;
        let points: Vec<SpaceTimePoint> = (0..n)
            .map(|i| SpaceTimePoint::new(i as f64, 0.0, 0.0))
            .collect();
        let z = vec![0.0; n];
        let d = Dataset::without_covariates(points, z).unwrap();
        let (train, valid) = split_train_validation(&d, 0.8, 42).unwrap();
        assert_eq!(train.n(), 20_808);
        assert_eq!(valid.n(), 5_202);
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let n = 101;
        let points: Vec<SpaceTimePoint> = (0..n)
            .map(|i| SpaceTimePoint::new(i as f64, -(i as f64), 0.5 * i as f64))
            .collect();
        let z: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let d = Dataset::without_covariates(points, z).unwrap();

        let (tr1, va1) = split_train_validation(&d, 0.3, 9).unwrap();
        let (tr2, va2) = split_train_validation(&d, 0.3, 9).unwrap();
        assert_eq!(tr1.z, tr2.z);
        assert_eq!(va1.z, va2.z);

        // Union of the split equals the input exactly once.
        let mut all: Vec<f64> = tr1.z.iter().chain(va1.z.iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect = d.z.clone();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, expect);

        let (tr3, _) = split_train_validation(&d, 0.3, 10).unwrap();
        assert_ne!(tr1.z, tr3.z, "different seeds should differ");
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let points = vec![
            SpaceTimePoint::new(0.1, -0.25, 1.0 / 3.0),
            SpaceTimePoint::new(f64::MIN_POSITIVE, 1e300, -7.125),
            SpaceTimePoint::new(0.30000000000000004, 2.2, 0.0),
        ];
        let z = vec![std::f64::consts::PI, -1e-17, 42.0];
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.5e-111, -3.0]);
        let d = Dataset::new(points, z, x).unwrap();

        let tmp = tempfile::NamedTempFile::new().unwrap();
        let schema = CsvSchema::default();
        save_dataset(tmp.path(), &d, &schema).unwrap();
        let d2 = load_dataset(tmp.path(), &schema).unwrap();
        assert_eq!(d.z, d2.z);
        assert_eq!(d.points, d2.points);
        assert_eq!(d.x, d2.x);
    }

    #[test]
    fn rejects_bad_fraction() {
        let d = Dataset::without_covariates(
            vec![
                SpaceTimePoint::new(0.0, 0.0, 0.0),
                SpaceTimePoint::new(1.0, 0.0, 0.0),
            ],
            vec![0.0, 1.0],
        )
        .unwrap();
        assert!(split_train_validation(&d, 0.0, 1).is_err());
        assert!(split_train_validation(&d, 1.0, 1).is_err());
    }
}
