//! Technique 3: constant-flux sources with one balancing node.
//!
//! Every nodal injection is a fixed signal; regularity is restored by
//! turning one node's density into an algebraic variable. The momentum
//! equation of the single segment attached to the balancing node reduces
//! to a quadratic in that density, because the flux derivatives can be
//! solved first from a constant full-rank block that never references the
//! balancing density. The density's rate then follows by implicit
//! differentiation of the quadratic, and the remaining density rates from
//! the mass rows augmented with that constraint.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{segment_momentum_rhs, StateVector};
use crate::error::{Error, Result};
use crate::inputs::Inputs;
use crate::linalg::UpdatableLu;
use crate::network::DiscretizedNetwork;
use crate::scalar::{half, s, Scalar};
use crate::slack::{expand_state, reduce_state, reduced_index};

pub struct BalancingSystem<T: Scalar> {
    pub dnet: Arc<DiscretizedNetwork<T>>,
    pub inputs: Arc<dyn Inputs<T>>,
    /// Node whose density is algebraic.
    pub node: usize,
    /// The single segment attached to the balancing node.
    pub segment: usize,
    /// Whether the balancing node is the segment's start endpoint.
    pub node_is_start: bool,
    /// Constant 2m x 2m flux block: conservation rows over all nodes plus
    /// the momentum left-hand sides of every segment except the attached
    /// one.
    flux_solver: UpdatableLu<T>,
    /// Adjoint vector r with S = r . flux_rhs, precomputed from the
    /// transposed flux block.
    r: DVector<T>,
    /// Gamma1 with the balancing density column removed (m x m).
    gamma1p: UpdatableLu<T>,
    /// Nodes with time-varying alpha, paired with their base value.
    update_nodes: Vec<(usize, T)>,
    /// Warm start for the quadratic root, in segment-side units.
    prev_u: T,
    /// Diagnostics refreshed by every RHS evaluation.
    pub last_rho_b: T,
    pub last_rho_b_dot: T,
    pub max_rel_residual: T,
    alpha_buf: DVector<T>,
    ddot_buf: DVector<T>,
}

/// Intermediate quantities of one RHS evaluation, shared between the
/// public entry points and the test oracles.
struct Prepared<T: Scalar> {
    x: StateVector<T>,
    /// All flux derivatives, [phi0_dot; phil_dot].
    fluxdot: DVector<T>,
    /// Constraint-row coefficients over all density indices.
    crow: DVector<T>,
    b_val: T,
}

impl<T: Scalar> BalancingSystem<T> {
    pub fn dim(&self) -> usize {
        self.dnet.state_dim() - 1
    }

    /// Row of segment `j`'s momentum equation inside the flux block.
    fn mom_row(&self, j: usize) -> usize {
        debug_assert_ne!(j, self.segment);
        self.dnet.n + if j < self.segment { j } else { j - 1 }
    }

    /// Strip the balancing density from a full state.
    pub fn reduce(&self, x: &StateVector<T>) -> DVector<T> {
        reduce_state(self.node, x)
    }

    /// Full state with the algebraic density solved at time `t`.
    pub fn full_state(&mut self, t: T, y: &DVector<T>) -> Result<StateVector<T>> {
        let p = self.prepare(t, y)?;
        Ok(p.x)
    }

    pub fn alpha_at(&self, t: T) -> DVector<T> {
        let mut a = self.dnet.alpha.clone();
        self.inputs.alpha(t, &mut a);
        a
    }

    /// All flux derivatives at the reduced state; never references the
    /// balancing density.
    pub fn flux_derivative(&mut self, t: T, y: &DVector<T>) -> Result<DVector<T>> {
        self.inputs.alpha(t, &mut self.alpha_buf);
        self.inputs.d_dot(t, &mut self.ddot_buf);
        let x = expand_state(&self.dnet, self.node, T::one(), y);
        self.solve_fluxes(&x)
    }

    fn solve_fluxes(&self, x: &StateVector<T>) -> Result<DVector<T>> {
        let (n, m) = (self.dnet.n, self.dnet.m);
        let mut fr = DVector::zeros(2 * m);
        fr.rows_mut(0, n).copy_from(&self.ddot_buf);
        for j in 0..m {
            if j != self.segment {
                fr[self.mom_row(j)] = segment_momentum_rhs(
                    &self.dnet,
                    &self.alpha_buf,
                    &x.rho,
                    &x.phi0,
                    &x.phil,
                    j,
                )?;
            }
        }
        self.flux_solver.solve(&[], &fr)
    }

    /// Quadratic coefficients of the attached segment's momentum balance
    /// in the segment-side density `u`: 0 = c2 u^2 + c1 u + c0.
    fn quadratic_coeffs(&self, s_rate: T, v: T, f_kernel: T) -> (T, T, T) {
        let j = self.segment;
        let a = self.dnet.seg_wave[j];
        let k = s::<T>(2.0) * a * a / self.dnet.seg_len[j];
        let sgn = if self.node_is_start { T::one() } else { -T::one() };
        let friction = self.dnet.seg_lambda[j] / (s::<T>(2.0) * self.dnet.seg_diam[j]);
        let c2 = -sgn * k;
        let c1 = s_rate;
        let c0 = s_rate * v + sgn * k * v * v + friction * f_kernel;
        (c2, c1, c0)
    }

    fn prepare(&mut self, t: T, y: &DVector<T>) -> Result<Prepared<T>> {
        let dnet = self.dnet.clone();
        let (n, m) = (dnet.n, dnet.m);
        self.inputs.alpha(t, &mut self.alpha_buf);
        self.inputs.d_dot(t, &mut self.ddot_buf);
        let mut x = expand_state(&dnet, self.node, T::one(), y);
        for i in 0..n {
            if i != self.node && x.rho[i] <= T::zero() {
                return Err(Error::NonPositiveDensity { node: i });
            }
        }
        let fluxdot = self.solve_fluxes(&x)?;

        let jb = self.segment;
        let s_rate = fluxdot[jb] + fluxdot[m + jb];
        let (far, far_factor) = if self.node_is_start {
            (dnet.seg_end[jb], T::one())
        } else {
            (dnet.seg_start[jb], self.alpha_buf[dnet.seg_start[jb]])
        };
        let v = far_factor * x.rho[far];
        let fsum = x.phi0[jb] + x.phil[jb];
        let f_kernel = fsum * fsum.abs();
        let (c2, c1, c0) = self.quadratic_coeffs(s_rate, v, f_kernel);
        let u = positive_root_near(c2, c1, c0, self.prev_u)?;
        self.prev_u = u;
        let residual = (c2 * u * u + c1 * u + c0).abs() / (c2.abs() * u * u);
        self.max_rel_residual = self.max_rel_residual.max(residual);
        let rho_b = if self.node_is_start {
            u / self.alpha_buf[self.node]
        } else {
            u
        };
        if rho_b <= T::zero() {
            return Err(Error::NonPositiveDensity { node: self.node });
        }
        x.rho[self.node] = rho_b;
        self.last_rho_b = rho_b;

        // constraint row: 0 = sum_i dQ/drho_i rho_dot_i - b_val, with the
        // known flux-derivative terms moved into b_val.
        let dqdu = s::<T>(2.0) * c2 * u + c1;
        let k = c2.abs();
        if dqdu.abs() <= s::<T>(1e-12) * k * u {
            return Err(Error::DoubleRoot);
        }
        let dqds = u + v;
        let sgn = if self.node_is_start { T::one() } else { -T::one() };
        let dqdv = s_rate + sgn * s(2.0) * k * v;
        let dqdf = dnet.seg_lambda[jb] / (s::<T>(2.0) * dnet.seg_diam[jb]);
        let mut crow = DVector::zeros(n);
        let mut b_val = T::zero();
        crow[self.node] = dqdu
            * if self.node_is_start {
                self.alpha_buf[self.node]
            } else {
                T::one()
            };
        crow[far] += dqdv * far_factor;
        // S depends on the state through the momentum rows of the other
        // segments; chain through the adjoint vector r.
        for j in 0..m {
            if j == jb {
                continue;
            }
            let rj = self.r[self.mom_row(j)];
            if rj == T::zero() {
                continue;
            }
            let (uu, vv) = (dnet.seg_start[j], dnet.seg_end[j]);
            let aj = dnet.seg_wave[j];
            let g4 = dnet.seg_len[j] * dnet.seg_lambda[j] / (s::<T>(4.0) * dnet.seg_diam[j]);
            let z = self.alpha_buf[uu].mul_add(x.rho[uu], x.rho[vv]);
            let fs = x.phi0[j] + x.phil[j];
            let fj = fs * fs.abs();
            let coef = dqds * rj;
            crow[uu] += coef * self.alpha_buf[uu] * (aj * aj + g4 * fj / (z * z));
            crow[vv] += coef * (g4 * fj / (z * z) - aj * aj);
            let dgdphi = -g4 * s::<T>(2.0) * fs.abs() / z;
            b_val -= coef * dgdphi * (fluxdot[j] + fluxdot[m + j]);
        }
        b_val -= dqdf * s::<T>(2.0) * fsum.abs() * s_rate;

        Ok(Prepared {
            x,
            fluxdot,
            crow,
            b_val,
        })
    }

    /// Reduced RHS: flux derivatives from the constant block, the
    /// algebraic density from the quadratic, its rate from implicit
    /// differentiation, and the remaining density rates from the mass
    /// rows with the constraint eliminated against the factorized
    /// Gamma1'.
    pub fn rhs(&mut self, t: T, y: &DVector<T>, out: &mut DVector<T>) -> Result<()> {
        let p = self.prepare(t, y)?;
        let dnet = self.dnet.clone();
        let (n, m) = (dnet.n, dnet.m);
        let b = self.node;
        let mut q = DVector::zeros(m);
        for j in 0..m {
            q[j] = p.x.phi0[j] - p.x.phil[j];
        }
        let scales: Vec<T> = self
            .update_nodes
            .iter()
            .map(|&(c, base)| self.alpha_buf[c] - base)
            .collect();
        let p0 = self.gamma1p.solve(&scales, &q)?;
        let gb = self.gamma_b_column();
        let p1 = self.gamma1p.solve(&scales, &gb)?;
        let mut ap = DVector::zeros(n - 1);
        for i in 0..n {
            if let Some(ri) = reduced_index(b, i) {
                ap[ri] = p.crow[i];
            }
        }
        let denom = p.crow[b] - ap.dot(&p1);
        if denom.abs() <= T::default_epsilon() * p.crow[b].abs().max(T::one()) {
            return Err(Error::Regularity(
                "singular augmented Gamma1a (constraint row eliminated to zero)".into(),
            ));
        }
        let rho_b_dot = (p.b_val - ap.dot(&p0)) / denom;
        self.last_rho_b_dot = rho_b_dot;
        for i in 0..n {
            if let Some(ri) = reduced_index(b, i) {
                out[ri] = p0[ri] - p1[ri] * rho_b_dot;
            }
        }
        for j in 0..m {
            out[n - 1 + j] = p.fluxdot[j];
            out[n - 1 + m + j] = p.fluxdot[m + j];
        }
        Ok(())
    }

    /// The removed Gamma1 column (entries of the balancing density in the
    /// mass rows); only the attached segment's row is populated.
    fn gamma_b_column(&self) -> DVector<T> {
        let mut gb = DVector::zeros(self.dnet.m);
        let jb = self.segment;
        let coeff = self.dnet.seg_len[jb]
            * half::<T>()
            * if self.node_is_start {
                self.alpha_buf[self.node]
            } else {
                T::one()
            };
        gb[jb] = coeff;
        gb
    }
}

/// Build the balancing system for a tree network. The balancing node must
/// be a leaf of the refined network so the flux block and the quadratic
/// stay decoupled from its density. `initial_rho_b` seeds the warm-started
/// root selection.
pub fn build_balancing_system<T: Scalar>(
    dnet: Arc<DiscretizedNetwork<T>>,
    inputs: Arc<dyn Inputs<T>>,
    node: usize,
    initial_rho_b: T,
) -> Result<BalancingSystem<T>> {
    let (n, m) = (dnet.n, dnet.m);
    if node >= n {
        return Err(Error::UnknownNode(format!("node index {node}")));
    }
    if !dnet.is_tree {
        return Err(Error::NotATree);
    }
    if initial_rho_b <= T::zero() {
        return Err(Error::NonPositiveParameter(
            "initial balancing density".into(),
        ));
    }
    let adj = dnet.adjacent_segments(node);
    if adj.len() != 1 {
        return Err(Error::InvalidDeletion(format!(
            "balancing node must have exactly one attached segment, found {}",
            adj.len()
        )));
    }
    let (segment, node_is_start) = adj[0];

    // constant flux block: conservation rows + momentum LHS of j != segment
    let dim = 2 * m;
    let mut mbar = DMatrix::zeros(dim, dim);
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        mbar[(u, j)] = dnet.seg_area[j];
        mbar[(v, m + j)] = -dnet.seg_area[j];
        if j != segment {
            let row = n + if j < segment { j } else { j - 1 };
            let hl = dnet.seg_len[j] * half::<T>();
            mbar[(row, j)] = hl;
            mbar[(row, m + j)] = hl;
        }
    }
    let mut e = DVector::zeros(dim);
    e[segment] = T::one();
    e[m + segment] = T::one();
    let r = mbar
        .transpose()
        .lu()
        .solve(&e)
        .ok_or_else(|| Error::Regularity("singular flux block".into()))?;
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Regularity("singular flux block".into()));
    }
    let flux_solver = UpdatableLu::new(mbar, Vec::new())
        .map_err(|_| Error::Regularity("singular flux block".into()))?;

    // Gamma1 with the balancing column removed, plus compressor updates
    let mut g1p = DMatrix::zeros(m, n - 1);
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        let hl = dnet.seg_len[j] * half::<T>();
        if let Some(c) = reduced_index(node, u) {
            g1p[(j, c)] = hl * dnet.alpha[u];
        }
        if let Some(c) = reduced_index(node, v) {
            g1p[(j, c)] += hl;
        }
    }
    let mut update_nodes = Vec::new();
    let mut updates = Vec::new();
    for c in inputs.varying_alpha_nodes() {
        if c == node {
            // only enters the rebuilt gamma_b column and the quadratic
            continue;
        }
        let col = reduced_index(node, c).unwrap();
        let mut u = DVector::zeros(m);
        for (j, leaves) in dnet.adjacent_segments(c) {
            if leaves {
                u[j] = dnet.seg_len[j] * half::<T>();
            }
        }
        update_nodes.push((c, dnet.alpha[c]));
        updates.push((col, u));
    }
    let gamma1p = UpdatableLu::new(g1p, updates)
        .map_err(|_| Error::Regularity("singular reduced Gamma1".into()))?;

    let prev_u = if node_is_start {
        dnet.alpha[node] * initial_rho_b
    } else {
        initial_rho_b
    };
    Ok(BalancingSystem {
        alpha_buf: dnet.alpha.clone(),
        ddot_buf: DVector::zeros(n),
        dnet,
        inputs,
        node,
        segment,
        node_is_start,
        flux_solver,
        r,
        gamma1p,
        update_nodes,
        prev_u,
        last_rho_b: initial_rho_b,
        last_rho_b_dot: T::zero(),
        max_rel_residual: T::zero(),
    })
}

/// Positive real root of `c2 u^2 + c1 u + c0 = 0` nearest `prev`,
/// evaluated in the cancellation-free form.
pub fn positive_root_near<T: Scalar>(c2: T, c1: T, c0: T, prev: T) -> Result<T> {
    if c2 == T::zero() {
        if c1 == T::zero() {
            return Err(Error::NoPositiveRoot);
        }
        let u = -c0 / c1;
        return if u > T::zero() {
            Ok(u)
        } else {
            Err(Error::NoPositiveRoot)
        };
    }
    let disc = c1 * c1 - s::<T>(4.0) * c2 * c0;
    if disc < T::zero() {
        return Err(Error::NoPositiveRoot);
    }
    let sq = disc.sqrt();
    let sgn = if c1 >= T::zero() { T::one() } else { -T::one() };
    let qq = -(c1 + sgn * sq) * half::<T>();
    let r1 = qq / c2;
    let r2 = if qq != T::zero() { c0 / qq } else { T::zero() };
    let mut best: Option<T> = None;
    for cand in [r1, r2] {
        if cand > T::zero() {
            best = match best {
                None => Some(cand),
                Some(b) if (cand - prev).abs() < (b - prev).abs() => Some(cand),
                other => other,
            };
        }
    }
    best.ok_or(Error::NoPositiveRoot)
}

/// Reduced mass matrix with the balancing density column and the attached
/// segment's momentum row deleted; reference for the decoupled solver.
pub fn assemble_mx4r<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    node: usize,
    segment: usize,
) -> DMatrix<T> {
    let (n, m) = (dnet.n, dnet.m);
    let dim = n + 2 * m - 1;
    let mut mx = DMatrix::zeros(dim, dim);
    let col_phi0 = |j: usize| n - 1 + j;
    let col_phil = |j: usize| n - 1 + m + j;
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        mx[(u, col_phi0(j))] = dnet.seg_area[j];
        mx[(v, col_phil(j))] = -dnet.seg_area[j];
        let hl = dnet.seg_len[j] * half::<T>();
        if let Some(c) = reduced_index(node, u) {
            mx[(n + j, c)] = hl * alpha[u];
        }
        if let Some(c) = reduced_index(node, v) {
            mx[(n + j, c)] += hl;
        }
        if j != segment {
            let row = n + m + if j < segment { j } else { j - 1 };
            mx[(row, col_phi0(j))] = hl;
            mx[(row, col_phil(j))] = hl;
        }
    }
    mx
}

/// Augmented Gamma1a: the mass rows over every density plus the appended
/// constraint row; reference for the block-eliminated solve.
pub fn assemble_gamma1a<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    crow: &DVector<T>,
) -> DMatrix<T> {
    let (n, m) = (dnet.n, dnet.m);
    let mut g = DMatrix::zeros(m + 1, n);
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        let hl = dnet.seg_len[j] * half::<T>();
        g[(j, u)] = hl * alpha[u];
        g[(j, v)] += hl;
    }
    for i in 0..n {
        g[(m, i)] = crow[i];
    }
    g
}
