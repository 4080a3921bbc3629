//! Individual-level data model: outcome `Y`, exposure `D`, instruments `Z`.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold on the pivoted-QR diagonal used to decide column rank.
const RANK_TOL: f64 = 1e-10;

/// Set of instrument indices (0-based, sorted, unique).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct InstrumentSet(Vec<usize>);

impl InstrumentSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn new(mut idx: Vec<usize>, n_instruments: usize) -> Result<Self> {
        idx.sort_unstable();
        idx.dedup();
        if let Some(&bad) = idx.iter().find(|&&j| j >= n_instruments) {
            return Err(Error::InvalidInput(format!(
                "instrument index {bad} out of range for L = {n_instruments}"
            )));
        }
        Ok(Self(idx))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn is_superset_of(&self, other: &InstrumentSet) -> bool {
        other.0.iter().all(|&j| self.contains(j))
    }

    /// Indices in `0..n_instruments` that are not in the set.
    pub fn complement(&self, n_instruments: usize) -> Vec<usize> {
        (0..n_instruments).filter(|&j| !self.contains(j)).collect()
    }
}

impl From<InstrumentSet> for Vec<usize> {
    fn from(s: InstrumentSet) -> Self {
        s.0
    }
}

/// Centered individual-level IV data.
#[derive(Debug, Clone)]
pub struct IvData {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DMatrix<f64>,
    /// Column means removed at construction, in order `Y, D, Z1..ZL`.
    removed_means: Vec<f64>,
}

impl IvData {
    /// Validates shapes and rank, then centers every column.
    pub fn new(y: DVector<f64>, d: DVector<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let l = z.ncols();
        if d.len() != n || z.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: Y has {n} rows, D has {}, Z has {}",
                d.len(),
                z.nrows()
            )));
        }
        if l == 0 {
            return Err(Error::InvalidInput("no instruments".into()));
        }
        if n <= l {
            return Err(Error::InvalidInput(format!(
                "need more observations than instruments (n = {n}, L = {l})"
            )));
        }
        if y.iter().chain(d.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in data".into()));
        }

        let mut removed_means = Vec::with_capacity(l + 2);
        let y = center(y, &mut removed_means);
        let d = center(d, &mut removed_means);
        let mut z = z;
        for mut col in z.column_iter_mut() {
            let m = centering_shift(col.mean(), col.amax());
            removed_means.push(m);
            col.add_scalar_mut(-m);
        }

        let rank = column_rank(&z);
        if rank < l {
            return Err(Error::RankDeficient { rank, cols: l });
        }
        Ok(Self {
            y,
            d,
            z,
            removed_means,
        })
    }

    /// Reads `Y,D,Z1,...,ZL` CSV with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 {
            return Err(Error::InvalidInput(
                "expected header `Y,D,Z1,...,ZL` with at least one instrument".into(),
            ));
        }
        if !headers[0].eq_ignore_ascii_case("y") || !headers[1].eq_ignore_ascii_case("d") {
            return Err(Error::InvalidInput(format!(
                "first two columns must be Y and D, found `{}` and `{}`",
                &headers[0], &headers[1]
            )));
        }
        let l = headers.len() - 2;
        let mut y = Vec::new();
        let mut d = Vec::new();
        let mut z = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != l + 2 {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} fields, expected {}",
                    row + 2,
                    rec.len(),
                    l + 2
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!("row {}: cannot parse `{s}` as a number", row + 2))
                })
            };
            y.push(parse(&rec[0])?);
            d.push(parse(&rec[1])?);
            for field in rec.iter().skip(2) {
                z.push(parse(field)?);
            }
        }
        let n = y.len();
        Self::new(
            DVector::from_vec(y),
            DVector::from_vec(d),
            DMatrix::from_row_slice(n, l, &z),
        )
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    /// Writes the (centered) data as `Y,D,Z1,...,ZL` CSV.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["Y".to_string(), "D".to_string()];
        header.extend((1..=self.n_instruments()).map(|j| format!("Z{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string(), self.d[i].to_string()];
            rec.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.z.ncols()
    }

    /// Means subtracted during construction (`Y, D, Z1..ZL`). All zero when the
    /// input was already centered.
    pub fn removed_means(&self) -> &[f64] {
        &self.removed_means
    }

    /// Sub-matrix of the instrument columns in `set`.
    pub fn z_subset(&self, set: &InstrumentSet) -> DMatrix<f64> {
        self.z.select_columns(set.indices())
    }
}

/// Means at rounding level are left alone so centered input passes through
/// bit-for-bit.
fn centering_shift(mean: f64, max_abs: f64) -> f64 {
    if mean.abs() <= 1e-14 * max_abs {
        0.0
    } else {
        mean
    }
}

fn center(mut v: DVector<f64>, means: &mut Vec<f64>) -> DVector<f64> {
    let m = centering_shift(v.mean(), v.amax());
    means.push(m);
    v.add_scalar_mut(-m);
    v
}

fn column_rank(z: &DMatrix<f64>) -> usize {
    let qr = z.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&v| v > RANK_TOL * max).count()
}

/// Ground-truth structural parameters (used by the simulation harness).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Error covariance of `(delta, xi)`, row-major 2x2.
    pub sigma: [[f64; 2]; 2],
}

impl ModelParams {
    pub fn new(beta: f64, alpha: Vec<f64>, gamma: Vec<f64>, sigma: [[f64; 2]; 2]) -> Result<Self> {
        if alpha.len() != gamma.len() {
            return Err(Error::InvalidInput("alpha and gamma lengths differ".into()));
        }
        if (sigma[0][1] - sigma[1][0]).abs() > 1e-12 {
            return Err(Error::InvalidInput("sigma must be symmetric".into()));
        }
        let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
        if !(sigma[0][0] > 0.0 && det > 0.0) {
            return Err(Error::InvalidInput("sigma must be positive definite".into()));
        }
        Ok(Self {
            beta,
            alpha,
            gamma,
            sigma,
        })
    }

    /// Support of `alpha`: the truly invalid instruments.
    pub fn invalid_set(&self) -> InstrumentSet {
        InstrumentSet(
            self.alpha
                .iter()
                .enumerate()
                .filter(|(_, a)| **a != 0.0)
                .map(|(j, _)| j)
                .collect(),
        )
    }

    pub fn sigma_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma[0][0], self.sigma[0][1], self.sigma[1][0], self.sigma[1][1])
    }
}

/// Thin-QR factorization of `Z` for applying `P_Z` and `P_{Z_E}`.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    q: DMatrix<f64>,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    ztd: DVector<f64>,
    yty: f64,
    dtd: f64,
    dty: f64,
}

impl ProjectionCache {
    pub fn new(data: &IvData) -> Self {
        let z = data.z();
        let q = z.clone().qr().q();
        Self {
            q,
            ztz: z.transpose() * z,
            zty: z.transpose() * data.y(),
            ztd: z.transpose() * data.d(),
            yty: data.y().dot(data.y()),
            dtd: data.d().dot(data.d()),
            dty: data.d().dot(data.y()),
        }
    }

    /// Orthonormal basis of the column span of `Z`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Orthonormal basis of the span of `Z_E`; `n x 0` for the empty set.
    pub fn subset_basis(&self, data: &IvData, set: &InstrumentSet) -> DMatrix<f64> {
        if set.is_empty() {
            return DMatrix::zeros(data.n(), 0);
        }
        data.z_subset(set).qr().q()
    }

    /// `P_Z v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * (self.q.transpose() * v)
    }

    /// `P_{Z_E} v` (zero for the empty set).
    pub fn project_subset(&self, data: &IvData, set: &InstrumentSet, v: &DVector<f64>) -> DVector<f64> {
        let qe = self.subset_basis(data, set);
        &qe * (qe.transpose() * v)
    }

    /// `a' P_Z b`.
    pub fn form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (self.q.transpose() * a).dot(&(self.q.transpose() * b))
    }

    /// `a' P_{Z^perp} b`.
    pub fn residual_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(b) - self.form(a, b)
    }

    pub fn ztz(&self) -> &DMatrix<f64> {
        &self.ztz
    }
    pub fn zty(&self) -> &DVector<f64> {
        &self.zty
    }
    pub fn ztd(&self) -> &DVector<f64> {
        &self.ztd
    }
    pub fn yty(&self) -> f64 {
        self.yty
    }
    pub fn dtd(&self) -> f64 {
        self.dtd
    }
    pub fn dty(&self) -> f64 {
        self.dty
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> IvData {
        let z = DMatrix::from_row_slice(6, 2, &[1.0, 0.5, 2.0, -1.0, 0.0, 1.5, -1.0, 2.0, 3.0, 0.0, -2.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let d = DVector::from_vec(vec![0.3, 1.0, -0.4, 0.2, 2.0, -1.0]);
        IvData::new(y, d, z).unwrap()
    }

    #[test]
    fn construction_centers_columns() {
        let data = small();
        assert!(data.y().mean().abs() < 1e-14);
        assert!(data.d().mean().abs() < 1e-14);
        for col in data.z().column_iter() {
            assert!(col.mean().abs() < 1e-14);
        }
        // centered input passes through unchanged
        let again = IvData::new(data.y().clone(), data.d().clone(), data.z().clone()).unwrap();
        assert!(again.removed_means().iter().all(|m| m.abs() < 1e-14));
        assert_eq!(again.y(), data.y());
    }

    #[test]
    fn rejects_rank_deficient_z() {
        let z = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        let y = DVector::from_element(5, 1.0);
        let err = IvData::new(y.clone(), y, z).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, cols: 2 }));
    }

    #[test]
    fn rejects_too_few_rows() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = DVector::from_element(2, 1.0);
        assert!(IvData::new(y.clone(), y, z).is_err());
    }

    #[test]
    fn projections_idempotent_and_symmetric() {
        let data = small();
        let cache = ProjectionCache::new(&data);
        let v = DVector::from_vec(vec![0.1, -2.0, 0.7, 1.1, 0.0, 4.0]);
        let w = DVector::from_vec(vec![1.0, 0.3, -0.2, 0.5, 2.0, -1.0]);
        let pv = cache.project(&v);
        let ppv = cache.project(&pv);
        assert!((&ppv - &pv).norm() <= 1e-10 * pv.norm());
        assert!((cache.project(&v).dot(&w) - v.dot(&cache.project(&w))).abs() < 1e-10);
        let set = InstrumentSet::empty();
        assert_eq!(cache.project_subset(&data, &set, &v).norm(), 0.0);
    }

    #[test]
    fn csv_roundtrip() {
        let data = small();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = IvData::from_csv_reader(buf.as_slice()).unwrap();
        assert!((back.z() - data.z()).norm() < 1e-12);
        assert!((back.y() - data.y()).norm() < 1e-12);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let text = "A,B,Z1\n1,2,3\n";
        assert!(IvData::from_csv_reader(text.as_bytes()).is_err());
    }

    #[test]
    fn instrument_set_complement() {
        let s = InstrumentSet::new(vec![3, 1, 3], 5).unwrap();
        assert_eq!(s.indices(), &[1, 3]);
        assert_eq!(s.complement(5), vec![0, 2, 4]);
        assert!(InstrumentSet::new(vec![5], 5).is_err());
    }
}
