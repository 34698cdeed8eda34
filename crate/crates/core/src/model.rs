//! Problem data: the vertex/connection incidence structure, capacities,
//! per-vertex utilities and the norms shared by every solver.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Norm index for the primal (`p`) or dual (`q`) space. Only the 1- and
/// 2-norms are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_index(p: u8) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(Error::InvalidInput(format!(
                "norm index must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }

    /// Norm of a vector.
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

impl Serialize for Norm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.index())
    }
}

impl<'de> Deserialize<'de> for Norm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = u8::deserialize(d)?;
        Norm::from_index(p).map_err(serde::de::Error::custom)
    }
}

/// Sparse binary `m x n` matrix: `C[j][i] = 1` iff connection `j` relates
/// to vertex `i`. Both adjacency directions are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    m: usize,
    n: usize,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    nnz: usize,
}

impl IncidenceMatrix {
    /// Builds the matrix from `(j, i)` pairs. Rejects out-of-range and
    /// duplicate pairs.
    pub fn new<I>(m: usize, n: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut rows = vec![Vec::new(); m];
        let mut cols = vec![Vec::new(); n];
        for (j, i) in entries {
            if j >= m || i >= n {
                return Err(Error::InvalidInput(format!(
                    "entry ({j}, {i}) outside a {m}x{n} matrix"
                )));
            }
            rows[j].push(i);
            cols[i].push(j);
        }
        let mut nnz = 0;
        for (j, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            if let Some(w) = row.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::InvalidInput(format!(
                    "duplicate entry ({j}, {})",
                    w[0]
                )));
            }
            nnz += row.len();
        }
        for col in cols.iter_mut() {
            col.sort_unstable();
        }
        Ok(Self {
            m,
            n,
            rows,
            cols,
            nnz,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Vertices related to connection `j`, ascending.
    pub fn row(&self, j: usize) -> &[usize] {
        &self.rows[j]
    }

    /// Connections related to vertex `i`, ascending.
    pub fn col(&self, i: usize) -> &[usize] {
        &self.cols[i]
    }

    pub fn contains(&self, j: usize, i: usize) -> bool {
        j < self.m && self.rows[j].binary_search(&i).is_ok()
    }

    /// All `(j, i)` pairs in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(j, row)| row.iter().map(move |&i| (j, i)))
    }

    /// Load on each connection, `C x`.
    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("rate vector", x.len(), self.n)?;
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&i| x[i]).sum())
            .collect())
    }

    /// Per-vertex price, `C^T lambda`.
    pub fn mat_t_vec(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        check_len("price vector", lambda.len(), self.m)?;
        Ok(self
            .cols
            .iter()
            .map(|col| col.iter().map(|&j| lambda[j]).sum())
            .collect())
    }

    /// Price seen by a single vertex, `<lambda, C_i>`.
    pub fn col_dot(&self, i: usize, lambda: &[f64]) -> f64 {
        self.cols[i].iter().map(|&j| lambda[j]).sum()
    }

    /// Largest eigenvalue of `C^T C` by power iteration from the normalized
    /// all-ones vector. Convergence is declared once the Rayleigh quotient
    /// changes by at most `tol` relative between sweeps.
    pub fn spectral_norm_sq(&self, tol: f64, max_iter: usize) -> Result<f64> {
        if tol <= 0.0 || !tol.is_finite() {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
        }
        if self.nnz == 0 {
            return Ok(0.0);
        }
        let mut v = vec![1.0 / (self.n as f64).sqrt(); self.n];
        let mut estimate = 0.0;
        for _ in 0..max_iter {
            let cv = self.mat_vec(&v)?;
            let next: f64 = cv.iter().map(|c| c * c).sum();
            let w = self.mat_t_vec(&cv)?;
            let norm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(next);
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
            if (next - estimate).abs() <= tol * next {
                return Ok(next);
            }
            estimate = next;
        }
        Err(Error::NoConvergence {
            what: "power iteration",
            iterations: max_iter,
            last: estimate,
        })
    }

    /// `max_j ||C_j||_{p*}`: the largest dual norm of a row.
    pub fn max_row_dual_norm(&self, p: Norm) -> f64 {
        match p {
            Norm::L2 => self
                .rows
                .iter()
                .map(|r| r.len())
                .max()
                .map_or(0.0, |d| (d as f64).sqrt()),
            Norm::L1 => {
                if self.nnz > 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Separable concave utility `U(x) = sum_i u_i(x_i)`.
pub trait Utility {
    /// Number of vertices.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize, x: f64) -> f64;

    fn derivative(&self, i: usize, x: f64) -> f64;

    /// Closed-form maximizer over `x >= 0` of
    /// `u_i(x) - cost * x - (mu / 2) (x - center)^2`, when one exists.
    /// `None` means the caller must fall back to a numerical search, and
    /// `Some(inf)` means the maximum is unbounded.
    fn best_response(&self, _i: usize, _cost: f64, _mu: f64, _center: f64) -> Option<f64> {
        None
    }

    /// Modulus of strong concavity shared by every `u_i` (0 if merely concave).
    fn strong_concavity(&self) -> f64 {
        0.0
    }
}

/// `u_i(x) = a_i x - (sigma n / 2) x^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticUtility {
    pub a: Vec<f64>,
    pub sigma: f64,
}

impl QuadraticUtility {
    pub fn new(a: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("utility coefficients must be finite".into()));
        }
        Ok(Self { a, sigma })
    }

    /// Curvature `sigma * n` of every `u_i`.
    pub fn curvature(&self) -> f64 {
        self.sigma * self.a.len() as f64
    }
}

impl Utility for QuadraticUtility {
    fn len(&self) -> usize {
        self.a.len()
    }

    fn value(&self, i: usize, x: f64) -> f64 {
        self.a[i] * x - 0.5 * self.curvature() * x * x
    }

    fn derivative(&self, i: usize, x: f64) -> f64 {
        self.a[i] - self.curvature() * x
    }

    fn best_response(&self, i: usize, cost: f64, mu: f64, center: f64) -> Option<f64> {
        let denom = self.curvature() + mu;
        let num = self.a[i] - cost + mu * center;
        if denom > 0.0 {
            Some((num / denom).max(0.0))
        } else if num > 0.0 {
            Some(f64::INFINITY)
        } else {
            Some(0.0)
        }
    }

    fn strong_concavity(&self) -> f64 {
        self.curvature()
    }
}

/// A network utility maximization instance: `max U(x)` s.t. `C x <= b`, `x >= 0`.
#[derive(Debug, Clone)]
pub struct ProblemInstance<U = QuadraticUtility> {
    pub c: IncidenceMatrix,
    pub b: Vec<f64>,
    pub utility: U,
    pub p: Norm,
    pub q: Norm,
}

impl<U: Utility> ProblemInstance<U> {
    pub fn new(c: IncidenceMatrix, b: Vec<f64>, utility: U, p: Norm, q: Norm) -> Result<Self> {
        check_len("capacity vector", b.len(), c.m())?;
        check_len("utility coefficients", utility.len(), c.n())?;
        if let Some(j) = b.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "capacity b[{j}] = {} must be finite and nonnegative",
                b[j]
            )));
        }
        Ok(Self { c, b, utility, p, q })
    }

    pub fn m(&self) -> usize {
        self.c.m()
    }

    pub fn n(&self) -> usize {
        self.c.n()
    }

    /// `U(x)`; rejects negative rates.
    pub fn utility_total(&self, x: &[f64]) -> Result<f64> {
        check_len("rate vector", x.len(), self.n())?;
        if let Some(i) = x.iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeComponent {
                what: "rate",
                index: i,
                value: x[i],
            });
        }
        Ok(x.iter()
            .enumerate()
            .map(|(i, &xi)| self.utility.value(i, xi))
            .sum())
    }

    /// `C x - b`.
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut r = self.c.mat_vec(x)?;
        for (rj, bj) in r.iter_mut().zip(&self.b) {
            *rj -= bj;
        }
        Ok(r)
    }

    /// `||(C x - b)_+||_q`.
    pub fn violation_norm(&self, x: &[f64]) -> Result<f64> {
        let pos: Vec<f64> = self.residual(x)?.into_iter().map(|r| r.max(0.0)).collect();
        Ok(self.q.of(&pos))
    }

    /// `max_j (C_j x - b_j)_+`.
    pub fn max_violation(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .residual(x)?
            .into_iter()
            .fold(0.0_f64, |acc, r| acc.max(r)))
    }
}

/// On-disk JSON layout of an instance with quadratic utilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub m: usize,
    pub n: usize,
    pub entries: Vec<[usize; 2]>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub sigma: f64,
    pub p: Norm,
    pub q: Norm,
}

impl ProblemInstance<QuadraticUtility> {
    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            m: self.m(),
            n: self.n(),
            entries: self.c.entries().map(|(j, i)| [j, i]).collect(),
            b: self.b.clone(),
            a: self.utility.a.clone(),
            sigma: self.utility.sigma,
            p: self.p,
            q: self.q,
        }
    }

    pub fn from_file(f: InstanceFile) -> Result<Self> {
        let c = IncidenceMatrix::new(f.m, f.n, f.entries.iter().map(|e| (e[0], e[1])))?;
        let utility = QuadraticUtility::new(f.a, f.sigma)?;
        Self::new(c, f.b, utility, f.p, f.q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("instance serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: InstanceFile = serde_json::from_str(s)?;
        Self::from_file(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = self.to_file();
        fs::write(path, serde_json::to_string_pretty(&f)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(m: usize, n: usize, e: &[(usize, usize)]) -> IncidenceMatrix {
        IncidenceMatrix::new(m, n, e.iter().copied()).unwrap()
    }

    fn inst(c: IncidenceMatrix, b: Vec<f64>, a: Vec<f64>, sigma: f64) -> ProblemInstance {
        ProblemInstance::new(c, b, QuadraticUtility::new(a, sigma).unwrap(), Norm::L2, Norm::L2)
            .unwrap()
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(IncidenceMatrix::new(1, 1, [(0, 1)]).is_err());
        assert!(IncidenceMatrix::new(1, 2, [(0, 1), (0, 1)]).is_err());
    }

    #[test]
    fn mat_vec_two_entry_sum() {
        let c = mat(1, 2, &[(0, 0), (0, 1)]);
        assert_eq!(c.mat_vec(&[1.0, 2.0]).unwrap(), vec![3.0]);
        assert!(c.mat_vec(&[1.0]).is_err());
    }

    #[test]
    fn empty_matrix_products_are_zero() {
        let c = mat(3, 2, &[]);
        assert_eq!(c.mat_vec(&[4.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(c.mat_t_vec(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 2]);
        assert_eq!(c.max_row_dual_norm(Norm::L2), 0.0);
        assert_eq!(c.max_row_dual_norm(Norm::L1), 0.0);
    }

    #[test]
    fn mat_t_vec_column_sum() {
        let c = mat(2, 1, &[(0, 0), (1, 0)]);
        assert_eq!(c.mat_t_vec(&[2.0, 3.0]).unwrap(), vec![5.0]);
        assert_eq!(c.mat_t_vec(&[0.0, 0.0]).unwrap(), vec![0.0]);
        assert!(c.mat_t_vec(&[1.0]).is_err());
    }

    #[test]
    fn spectral_small_cases() {
        let one = mat(1, 1, &[(0, 0)]);
        assert!((one.spectral_norm_sq(1e-12, 100).unwrap() - 1.0).abs() < 1e-12);
        let pair = mat(1, 2, &[(0, 0), (0, 1)]);
        assert!((pair.spectral_norm_sq(1e-12, 100).unwrap() - 2.0).abs() < 1e-10);
        assert!(pair.spectral_norm_sq(0.0, 100).is_err());
    }

    #[test]
    fn max_row_dual_norms() {
        let c = mat(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        assert!((c.max_row_dual_norm(Norm::L2) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.max_row_dual_norm(Norm::L1), 1.0);
    }

    #[test]
    fn utility_hand_values() {
        let p = inst(mat(1, 1, &[(0, 0)]), vec![1.0], vec![2.0], 0.5);
        assert_eq!(p.utility_total(&[0.0]).unwrap(), 0.0);
        assert!((p.utility_total(&[1.0]).unwrap() - 1.75).abs() < 1e-15);
        assert!(matches!(
            p.utility_total(&[-1.0]),
            Err(Error::NegativeComponent { index: 0, .. })
        ));
    }

    #[test]
    fn violation_single_constraint() {
        let p = inst(mat(1, 1, &[(0, 0)]), vec![1.0], vec![2.0], 0.5);
        assert_eq!(p.violation_norm(&[3.0]).unwrap(), 2.0);
        assert_eq!(p.violation_norm(&[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_negative_capacity() {
        let c = mat(1, 1, &[(0, 0)]);
        let u = QuadraticUtility::new(vec![1.0], 0.1).unwrap();
        assert!(ProblemInstance::new(c, vec![-1.0], u, Norm::L2, Norm::L2).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = inst(
            mat(2, 3, &[(0, 0), (1, 2), (0, 1)]),
            vec![0.1, 12.345678901234567],
            vec![1.0, 0.3, 49.99999999999999],
            0.001,
        );
        let back = ProblemInstance::from_json(&p.to_json()).unwrap();
        assert_eq!(back.c, p.c);
        assert_eq!(back.b, p.b);
        assert_eq!(back.utility, p.utility);
        assert_eq!(back.to_json(), p.to_json());
    }

    #[test]
    fn json_rejects_bad_norm() {
        let s = r#"{"m":1,"n":1,"entries":[[0,0]],"b":[1],"a":[1],"sigma":0.1,"p":3,"q":2}"#;
        assert!(ProblemInstance::from_json(s).is_err());
    }
}
