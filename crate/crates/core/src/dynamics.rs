//! Right-hand side `G(x)`, mass-matrix variants, numerical rank reports,
//! and linepack (stored mass).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{DiscretizedNetwork, MatrixSet};
use crate::scalar::{half, s, Scalar};

/// Density floor below which a segment is considered locally depleted.
pub fn depletion_floor<T: Scalar>() -> T {
    s(1e-6)
}

/// Full state: node densities (inflow side) and segment endpoint fluxes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Scalar> {
    pub rho: DVector<T>,
    pub phi0: DVector<T>,
    pub phil: DVector<T>,
}

impl<T: Scalar> StateVector<T> {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            rho: DVector::zeros(n),
            phi0: DVector::zeros(m),
            phil: DVector::zeros(m),
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len() + self.phi0.len() + self.phil.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat layout [rho; phi0; phil].
    pub fn to_flat(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.len());
        let n = self.rho.len();
        let m = self.phi0.len();
        out.rows_mut(0, n).copy_from(&self.rho);
        out.rows_mut(n, m).copy_from(&self.phi0);
        out.rows_mut(n + m, m).copy_from(&self.phil);
        out
    }

    pub fn from_flat(n: usize, m: usize, flat: &DVector<T>) -> Self {
        assert_eq!(flat.len(), n + 2 * m);
        Self {
            rho: flat.rows(0, n).into_owned(),
            phi0: flat.rows(n, m).into_owned(),
            phil: flat.rows(n + m, m).into_owned(),
        }
    }
}

/// `(x + y) .* |x + y| ./ z`, the signed-square friction kernel.
pub fn hadamard_f<T: Scalar>(x: &DVector<T>, y: &DVector<T>, z: &DVector<T>) -> Result<DVector<T>> {
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), z.len());
    let mut out = DVector::zeros(x.len());
    for i in 0..x.len() {
        if z[i] == T::zero() {
            return Err(Error::Depletion { segment: i });
        }
        let sum = x[i] + y[i];
        out[i] = sum * sum.abs() / z[i];
    }
    Ok(out)
}

/// Momentum-row right-hand side of segment `j`:
/// `a^2 (alpha_u rho_u - rho_v) - Gamma4 (phi0+phil)|phi0+phil| / (alpha_u rho_u + rho_v)`.
///
/// The pressure difference is evaluated with a fused multiply-add so
/// steady-state residuals resolve well below 1e-9.
#[inline]
pub fn segment_momentum_rhs<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    rho: &DVector<T>,
    phi0: &DVector<T>,
    phil: &DVector<T>,
    j: usize,
) -> Result<T> {
    let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
    let a = dnet.seg_wave[j];
    let gamma4 = dnet.seg_len[j] * dnet.seg_lambda[j] / (s::<T>(4.0) * dnet.seg_diam[j]);
    let denom = alpha[u].mul_add(rho[u], rho[v]);
    if denom <= depletion_floor() {
        return Err(Error::Depletion { segment: j });
    }
    let dp = alpha[u].mul_add(rho[u], -rho[v]);
    let fsum = phi0[j] + phil[j];
    Ok(a * a * dp - gamma4 * fsum * fsum.abs() / denom)
}

/// Assemble `G(x)` with rows ordered [conservation d_dot; mass phi0 - phil;
/// momentum].
pub fn rhs_g<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    x: &StateVector<T>,
    d_dot: &DVector<T>,
) -> Result<DVector<T>> {
    let (n, m) = (dnet.n, dnet.m);
    for i in 0..n {
        if x.rho[i] <= T::zero() {
            return Err(Error::NonPositiveDensity { node: i });
        }
    }
    let mut g = DVector::zeros(n + 2 * m);
    g.rows_mut(0, n).copy_from(d_dot);
    for j in 0..m {
        g[n + j] = x.phi0[j] - x.phil[j];
        g[n + m + j] = segment_momentum_rhs(dnet, alpha, &x.rho, &x.phi0, &x.phil, j)?;
    }
    Ok(g)
}

/// Total stored mass: sum over segments of `A l/2 (alpha_u rho_u + rho_v)`
/// (trapezoid between the segment's endpoint densities).
pub fn linepack<T: Scalar>(
    x: &StateVector<T>,
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
) -> T {
    let mut total = T::zero();
    for j in 0..dnet.m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        total += dnet.seg_area[j]
            * dnet.seg_len[j]
            * half::<T>()
            * (alpha[u] * x.rho[u] + x.rho[v]);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassVariant {
    /// (n+2m) x (n+2m), singular on trees.
    Full,
    /// Density column and conservation row of `node` deleted.
    Slack { node: usize },
    /// Density column of `node` and momentum row of `segment` deleted.
    Balancing { node: usize, segment: usize },
}

#[derive(Debug, Clone)]
pub struct MassMatrixVariant<T: Scalar> {
    pub kind: MassVariant,
    pub matrix: DMatrix<T>,
    pub deleted_node: Option<usize>,
    pub deleted_segment: Option<usize>,
}

/// Assemble `[[0, K0, Kl], [Gamma1, 0, 0], [0, Gamma2, Gamma2]]` with
/// rows/columns removed per the requested variant.
pub fn mass_matrix<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    ms: &MatrixSet<T>,
    variant: MassVariant,
) -> Result<MassMatrixVariant<T>> {
    let (n, m) = (dnet.n, dnet.m);
    let dim = n + 2 * m;
    let mut full = DMatrix::zeros(dim, dim);
    full.view_mut((0, n), (n, m)).copy_from(&ms.k0);
    full.view_mut((0, n + m), (n, m)).copy_from(&ms.kl);
    full.view_mut((n, 0), (m, n)).copy_from(&ms.gamma1);
    for j in 0..m {
        full[(n + m + j, n + j)] = ms.gamma2[j];
        full[(n + m + j, n + m + j)] = ms.gamma2[j];
    }
    let (matrix, deleted_node, deleted_segment) = match variant {
        MassVariant::Full => (full, None, None),
        MassVariant::Slack { node } => {
            if node >= n {
                return Err(Error::InvalidDeletion(format!("node {node} out of range")));
            }
            (full.remove_row(node).remove_column(node), Some(node), None)
        }
        MassVariant::Balancing { node, segment } => {
            if node >= n {
                return Err(Error::InvalidDeletion(format!("node {node} out of range")));
            }
            if segment >= m {
                return Err(Error::InvalidDeletion(format!(
                    "segment {segment} out of range"
                )));
            }
            (
                full.remove_row(n + m + segment).remove_column(node),
                Some(node),
                Some(segment),
            )
        }
    };
    Ok(MassMatrixVariant {
        kind: variant,
        matrix,
        deleted_node,
        deleted_segment,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RankReport<T: Scalar> {
    pub dim: usize,
    pub numerical_rank: usize,
    pub deficiency: usize,
    pub tolerance: T,
}

/// Numerical rank via singular values with tolerance `dim * eps * sigma_max`.
pub fn rank_report<T: Scalar>(matrix: &DMatrix<T>) -> RankReport<T> {
    let dim = matrix.nrows().max(matrix.ncols());
    let min_dim = matrix.nrows().min(matrix.ncols());
    let svd = matrix.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(T::zero(), |a, &b| a.max(b));
    let tol = T::from_usize(dim).unwrap() * T::default_epsilon() * smax;
    let rank = svd.singular_values.iter().filter(|&&sv| sv > tol).count();
    RankReport {
        dim: min_dim,
        numerical_rank: rank,
        deficiency: min_dim - rank,
        tolerance: tol,
    }
}
