//! Factorize-once linear solves with low-rank column updates.
//!
//! The reduced mass matrices change only through a handful of scaled
//! columns (time-varying compressor ratios, the sigmoid droop column), so
//! solves against `A + sum_i s_i * u_i * e_{c_i}^T` reuse one LU of `A`
//! via the Woodbury identity instead of refactorizing.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct UpdatableLu<T: Scalar> {
    lu: LU<T, Dyn, Dyn>,
    dim: usize,
    /// Update column vectors u_i and their target column indices c_i.
    cols: Vec<usize>,
    /// w_i = A^{-1} u_i, precomputed.
    w: Vec<DVector<T>>,
}

impl<T: Scalar> UpdatableLu<T> {
    pub fn new(a: DMatrix<T>, updates: Vec<(usize, DVector<T>)>) -> Result<Self> {
        let dim = a.nrows();
        let lu = a.lu();
        // nalgebra's LU is not rank-revealing; probe with a solve.
        let probe = lu
            .solve(&DVector::from_element(dim, T::one()))
            .ok_or_else(|| Error::Regularity("LU solve failed (singular matrix)".into()))?;
        if probe.iter().any(|x| !x.is_finite()) {
            return Err(Error::Regularity("non-finite LU solve (singular matrix)".into()));
        }
        let mut cols = Vec::new();
        let mut w = Vec::new();
        for (c, u) in updates {
            let wi = lu
                .solve(&u)
                .ok_or_else(|| Error::Regularity("LU solve failed".into()))?;
            cols.push(c);
            w.push(wi);
        }
        Ok(Self { lu, dim, cols, w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solve `(A + sum_i scale_i u_i e_{c_i}^T) x = b`. `scales` must match
    /// the update list passed at construction; all-zero scales reduce to a
    /// plain solve against `A`.
    pub fn solve(&self, scales: &[T], b: &DVector<T>) -> Result<DVector<T>> {
        assert_eq!(scales.len(), self.cols.len());
        let mut t = self
            .lu
            .solve(b)
            .ok_or_else(|| Error::Regularity("LU solve failed".into()))?;
        let active: Vec<usize> = (0..scales.len())
            .filter(|&i| scales[i] != T::zero())
            .collect();
        if active.is_empty() {
            return Ok(t);
        }
        let k = active.len();
        // capacitance M[r][q] = delta_rq + s_q * w_q[c_r]
        let mut cap = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (r, &ir) in active.iter().enumerate() {
            for (q, &iq) in active.iter().enumerate() {
                let mut v = scales[iq] * self.w[iq][self.cols[ir]];
                if r == q {
                    v += T::one();
                }
                cap[(r, q)] = v;
            }
            rhs[r] = t[self.cols[ir]];
        }
        let y = cap
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Regularity("singular Woodbury capacitance".into()))?;
        for (q, &iq) in active.iter().enumerate() {
            let coeff = scales[iq] * y[q];
            t.axpy(-coeff, &self.w[iq], T::one());
        }
        Ok(t)
    }
}
