//! Technique 1: infinite flux reservoir (slack node).
//!
//! One node's density is an input signal; its conservation equation is
//! deleted and the remaining square system `M_x4 xdot = G~ - M_x3 rho_dot`
//! is factorized once. The implied slack injection is unbounded and is
//! reported as a diagnostic.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{segment_momentum_rhs, StateVector};
use crate::error::{Error, Result};
use crate::inputs::Inputs;
use crate::linalg::UpdatableLu;
use crate::network::DiscretizedNetwork;
use crate::scalar::{half, Scalar};

/// Specified density at the slack node.
pub enum DensityProfile<T: Scalar> {
    Constant(T),
    /// time -> (density, density rate)
    TimeVarying(Box<dyn Fn(T) -> (T, T) + Send + Sync>),
}

impl<T: Scalar> DensityProfile<T> {
    pub fn at(&self, t: T) -> (T, T) {
        match self {
            DensityProfile::Constant(rho) => (*rho, T::zero()),
            DensityProfile::TimeVarying(f) => f(t),
        }
    }
}

pub struct SlackSystem<T: Scalar> {
    pub dnet: Arc<DiscretizedNetwork<T>>,
    pub inputs: Arc<dyn Inputs<T>>,
    pub slack_node: usize,
    pub profile: DensityProfile<T>,
    solver: UpdatableLu<T>,
    /// Refined nodes with time-varying alpha, paired with their base value.
    update_nodes: Vec<(usize, T)>,
    alpha_buf: DVector<T>,
    ddot_buf: DVector<T>,
}

impl<T: Scalar> SlackSystem<T> {
    /// Reduced index of a full state index (slack density column removed).
    #[inline]
    pub fn reduced_index(&self, full: usize) -> Option<usize> {
        reduced_index(self.slack_node, full)
    }

    pub fn dim(&self) -> usize {
        self.dnet.state_dim() - 1
    }

    /// Strip the slack density from a full state.
    pub fn reduce(&self, x: &StateVector<T>) -> DVector<T> {
        reduce_state(self.slack_node, x)
    }

    /// Rebuild the full state, inserting the profile density at time `t`.
    pub fn full_state(&self, t: T, y: &DVector<T>) -> StateVector<T> {
        let (rho_s, _) = self.profile.at(t);
        expand_state(&self.dnet, self.slack_node, rho_s, y)
    }

    pub fn alpha_at(&self, t: T) -> DVector<T> {
        let mut a = self.dnet.alpha.clone();
        self.inputs.alpha(t, &mut a);
        a
    }

    /// Implied slack injection (kg/s) from the deleted conservation row.
    pub fn slack_flow(&self, x: &StateVector<T>) -> T {
        let mut d = T::zero();
        for (j, leaves) in self.dnet.adjacent_segments(self.slack_node) {
            if leaves {
                d += self.dnet.seg_area[j] * x.phi0[j];
            } else {
                d -= self.dnet.seg_area[j] * x.phil[j];
            }
        }
        d
    }

    /// Reduced RHS: `xdot~ = M_x4^{-1} (G~ - M_x3 rho_dot^(1))`.
    pub fn rhs(&mut self, t: T, y: &DVector<T>, out: &mut DVector<T>) -> Result<()> {
        let dnet = self.dnet.clone();
        self.inputs.alpha(t, &mut self.alpha_buf);
        self.inputs.d_dot(t, &mut self.ddot_buf);
        let (rho_s, rho_s_dot) = self.profile.at(t);
        let x = expand_state(&dnet, self.slack_node, rho_s, y);
        let g = self.reduced_g(&dnet, &x, rho_s_dot)?;
        let scales: Vec<T> = self
            .update_nodes
            .iter()
            .map(|&(c, base)| self.alpha_buf[c] - base)
            .collect();
        let ydot = self.solver.solve(&scales, &g)?;
        out.copy_from(&ydot);
        Ok(())
    }

    fn reduced_g(
        &self,
        dnet: &DiscretizedNetwork<T>,
        x: &StateVector<T>,
        rho_s_dot: T,
    ) -> Result<DVector<T>> {
        let (n, m) = (dnet.n, dnet.m);
        let s = self.slack_node;
        let mut g = DVector::zeros(n + 2 * m - 1);
        for i in 0..n {
            if i != s {
                g[reduced_index(s, i).unwrap()] = self.ddot_buf[i];
            }
        }
        for j in 0..m {
            let mass_row = reduced_index(s, n + j).unwrap();
            g[mass_row] = x.phi0[j] - x.phil[j];
            g[reduced_index(s, n + m + j).unwrap()] =
                segment_momentum_rhs(dnet, &self.alpha_buf, &x.rho, &x.phi0, &x.phil, j)?;
        }
        if rho_s_dot != T::zero() {
            // subtract M_x3 rho_dot: Gamma1 entries of the slack column
            for (j, leaves) in dnet.adjacent_segments(s) {
                let coeff = dnet.seg_len[j]
                    * half::<T>()
                    * if leaves { self.alpha_buf[s] } else { T::one() };
                let mass_row = reduced_index(s, dnet.n + j).unwrap();
                g[mass_row] -= coeff * rho_s_dot;
            }
        }
        Ok(g)
    }
}

#[inline]
pub(crate) fn reduced_index(slack: usize, full: usize) -> Option<usize> {
    use std::cmp::Ordering::*;
    match full.cmp(&slack) {
        Less => Some(full),
        Equal => None,
        Greater => Some(full - 1),
    }
}

pub(crate) fn reduce_state<T: Scalar>(slack: usize, x: &StateVector<T>) -> DVector<T> {
    let n = x.rho.len();
    let m = x.phi0.len();
    let mut y = DVector::zeros(n + 2 * m - 1);
    for i in 0..n {
        if let Some(r) = reduced_index(slack, i) {
            y[r] = x.rho[i];
        }
    }
    for j in 0..m {
        y[n - 1 + j] = x.phi0[j];
        y[n - 1 + m + j] = x.phil[j];
    }
    y
}

pub(crate) fn expand_state<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    slack: usize,
    rho_s: T,
    y: &DVector<T>,
) -> StateVector<T> {
    let (n, m) = (dnet.n, dnet.m);
    let mut x = StateVector::zeros(n, m);
    for i in 0..n {
        x.rho[i] = match reduced_index(slack, i) {
            Some(r) => y[r],
            None => rho_s,
        };
    }
    for j in 0..m {
        x.phi0[j] = y[n - 1 + j];
        x.phil[j] = y[n - 1 + m + j];
    }
    x
}

/// Assemble the reduced mass matrix `M_x4` (slack row/column deleted) at the
/// given ratios.
pub fn assemble_mx4<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    slack: usize,
) -> DMatrix<T> {
    let (n, m) = (dnet.n, dnet.m);
    let dim = n + 2 * m - 1;
    let mut mx4 = DMatrix::zeros(dim, dim);
    let col_phi0 = |j: usize| n - 1 + j;
    let col_phil = |j: usize| n - 1 + m + j;
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        // conservation rows
        if let Some(r) = reduced_index(slack, u) {
            mx4[(r, col_phi0(j))] = dnet.seg_area[j];
        }
        if let Some(r) = reduced_index(slack, v) {
            mx4[(r, col_phil(j))] = -dnet.seg_area[j];
        }
        // mass rows (Gamma1)
        let mass_row = reduced_index(slack, n + j).unwrap();
        let hl = dnet.seg_len[j] * half::<T>();
        if let Some(c) = reduced_index(slack, u) {
            mx4[(mass_row, c)] = hl * alpha[u];
        }
        if let Some(c) = reduced_index(slack, v) {
            mx4[(mass_row, c)] += hl;
        }
        // momentum rows (Gamma2)
        let mom_row = reduced_index(slack, n + m + j).unwrap();
        mx4[(mom_row, col_phi0(j))] = hl;
        mx4[(mom_row, col_phil(j))] = hl;
    }
    mx4
}

/// Build the slack system: delete the node's conservation row and density
/// column, factorize `M_x4` once (time-varying compressor columns are
/// handled as low-rank updates).
pub fn build_slack_system<T: Scalar>(
    dnet: Arc<DiscretizedNetwork<T>>,
    inputs: Arc<dyn Inputs<T>>,
    slack_node: usize,
    profile: DensityProfile<T>,
) -> Result<SlackSystem<T>> {
    if slack_node >= dnet.n {
        return Err(Error::UnknownNode(format!("node index {slack_node}")));
    }
    let mx4 = assemble_mx4(&dnet, &dnet.alpha, slack_node);
    let mut update_nodes = Vec::new();
    let mut updates = Vec::new();
    for c in inputs.varying_alpha_nodes() {
        if c == slack_node {
            // only enters M_x3, which is rebuilt per evaluation
            continue;
        }
        let col = reduced_index(slack_node, c).unwrap();
        let mut u = DVector::zeros(mx4.nrows());
        for (j, leaves) in dnet.adjacent_segments(c) {
            if leaves {
                let mass_row = reduced_index(slack_node, dnet.n + j).unwrap();
                u[mass_row] = dnet.seg_len[j] * half::<T>();
            }
        }
        update_nodes.push((c, dnet.alpha[c]));
        updates.push((col, u));
    }
    let solver = UpdatableLu::new(mx4, updates)
        .map_err(|_| Error::Regularity("M_x4 is singular (Theorem 3 preconditions violated)".into()))?;
    let n = dnet.n;
    Ok(SlackSystem {
        alpha_buf: dnet.alpha.clone(),
        ddot_buf: DVector::zeros(n),
        dnet,
        inputs,
        slack_node,
        profile,
        solver,
        update_nodes,
    })
}
