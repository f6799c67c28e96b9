//! Compressed sparse rows and a banded LU factorization with partial pivoting.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(trips.len());
        let mut data: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *data.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            data.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            data,
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.data[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    /// `y = x A`, i.e. `A^T x`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += xr * v;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                trips.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.n, trips)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }
}

/// LU factors of a band matrix with `kl` sub- and `ku` super-diagonals.
/// Rows are stored over columns `[r - kl, r + kl + ku]` to leave room for pivoting fill-in.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    rows: Vec<f64>,
    lower: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + (c + self.kl - r)
    }

    /// Factors the matrix given by its entries; entries outside the band are an error.
    pub fn factor(
        n: usize,
        kl: usize,
        ku: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let width = 2 * kl + ku + 1;
        let mut lu = BandLu {
            n,
            kl,
            ku,
            width,
            rows: vec![0.0; n * width],
            lower: vec![0.0; n * kl.max(1)],
            piv: vec![0; n],
        };
        for (r, c, v) in entries {
            if c + kl < r || c > r + ku {
                return Err(Error::Numeric(format!("entry ({r}, {c}) outside band ({kl}, {ku})")));
            }
            let k = lu.at(r, c);
            lu.rows[k] += v;
        }
        let span = kl + ku;
        for j in 0..n {
            let last_row = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = lu.rows[lu.at(j, j)].abs();
            for r in j + 1..=last_row {
                let a = lu.rows[lu.at(r, j)].abs();
                if a > best {
                    best = a;
                    p = r;
                }
            }
            if !(best > 0.0) {
                return Err(Error::Numeric(format!("singular band matrix at column {j}")));
            }
            lu.piv[j] = p;
            let last_col = (j + span).min(n - 1);
            if p != j {
                for c in j..=last_col {
                    let (a, b) = (lu.at(j, c), lu.at(p, c));
                    lu.rows.swap(a, b);
                }
            }
            let pivot = lu.rows[lu.at(j, j)];
            for r in j + 1..=last_row {
                let k = lu.at(r, j);
                let l = lu.rows[k] / pivot;
                lu.rows[k] = 0.0;
                lu.lower[j * kl.max(1) + (r - j - 1)] = l;
                if l == 0.0 {
                    continue;
                }
                let (src, dst) = (lu.at(j, j + 1), lu.at(r, j + 1));
                for c in 0..last_col - j {
                    lu.rows[dst + c] -= l * lu.rows[src + c];
                }
            }
        }
        Ok(lu)
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let kl = self.kl;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != 0.0 {
                for r in j + 1..=(j + kl).min(n - 1) {
                    b[r] -= self.lower[j * kl.max(1) + (r - j - 1)] * bj;
                }
            }
        }
        let span = kl + self.ku;
        for j in (0..n).rev() {
            let last_col = (j + span).min(n - 1);
            let base = self.at(j, j);
            let mut s = b[j];
            for c in j + 1..=last_col {
                s -= self.rows[base + (c - j)] * b[c];
            }
            b[j] = s / self.rows[base];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    #[test]
    fn csr_round_trip() {
        let m = CsrMatrix::from_triplets(3, vec![(0, 1, 2.0), (2, 0, 1.0), (0, 1, 1.0), (1, 1, -4.0)]);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, -4.0, 1.0]);
        assert_eq!(m.vec_mul(&[1.0, 1.0, 1.0]), m.transpose().mul_vec(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn band_lu_solves_with_pivoting() {
        // a band matrix whose leading diagonal entry is tiny forces a row swap
        let n = 30;
        let (kl, ku) = (3, 2);
        let mut dense = vec![vec![0.0; n]; n];
        let mut trips = Vec::new();
        for r in 0..n {
            for c in r.saturating_sub(kl)..=(r + ku).min(n - 1) {
                let v = if r == c {
                    if r % 7 == 0 {
                        1e-14
                    } else {
                        0.5 + r as f64 * 0.1
                    }
                } else {
                    ((r * 31 + c * 17) % 11) as f64 / 5.0 - 1.0
                };
                dense[r][c] = v;
                trips.push((r, c, v));
            }
        }
        let lu = BandLu::factor(n, kl, ku, trips).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = dense_mul(&dense, &x);
        lu.solve(&mut b);
        for (got, want) in b.iter().zip(&x) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}
