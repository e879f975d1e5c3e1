//! Technique 2: finite flux reservoir with sigmoid saturation and
//! density droop.
//!
//! The reservoir node behaves like a slack node whose outflow `w` is
//! clamped to `(0, phi_m)` through a logistic reparametrization
//! `w = phi_m S1(z)`, and whose density sags with the outflow along a
//! droop curve `rho_s = rho_n S2(w)`. The flux state of the attached
//! segment is replaced by the latent coordinate `z`; the droop couples
//! back into the mass rows as a rank-one column update of the reduced
//! mass matrix, so the base factorization is still reused across the
//! whole run.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{segment_momentum_rhs, StateVector};
use crate::error::{Error, Result};
use crate::inputs::Inputs;
use crate::linalg::UpdatableLu;
use crate::network::DiscretizedNetwork;
use crate::scalar::{half, s, Scalar};
use crate::slack::{assemble_mx4, expand_state, reduced_index};

/// Default width of the well-behaved band of the latent coordinate.
pub fn default_band_radius<T: Scalar>() -> T {
    s(10.0)
}

/// Overflow-safe logistic `e^x / (1 + e^x)`.
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Overflow-safe logistic derivative `S(x)(1 - S(x))`.
pub fn logistic_deriv<T: Scalar>(x: T) -> T {
    let e = (-x.abs()).exp();
    let d = T::one() + e;
    e / (d * d)
}

/// Reservoir parameters. `phi_m` is the saturation flux of the attached
/// segment (kg m^-2 s^-1), `phi_mid` the droop midpoint flux, `gamma` the
/// droop steepness, `rho_n` the no-load density scale, and `band_radius`
/// the half-width `r` of the band where the latent coordinate moves
/// freely.
#[derive(Debug, Clone)]
pub struct SigmoidSource<T: Scalar> {
    pub node: usize,
    pub phi_m: T,
    pub phi_mid: T,
    pub gamma: T,
    pub rho_n: T,
    pub band_radius: T,
}

impl<T: Scalar> SigmoidSource<T> {
    /// Saturating outflow `w = phi_m S1(z)`.
    pub fn flux(&self, z: T) -> T {
        self.phi_m * logistic(z)
    }

    /// `h1(z) = dw/dz = phi_m (S1 - S1^2)`.
    pub fn h1(&self, z: T) -> T {
        self.phi_m * logistic_deriv(z)
    }

    /// Droop curve `rho_s(w) = rho_n S2(w)`, `S2 = S(gamma (phi_mid - w))`.
    pub fn droop(&self, w: T) -> T {
        self.rho_n * logistic(self.gamma * (self.phi_mid - w))
    }

    /// `h2(w) = d rho_s / dw = rho_n gamma (S2^2 - S2) < 0`.
    pub fn h2(&self, w: T) -> T {
        -self.rho_n * self.gamma * logistic_deriv(self.gamma * (self.phi_mid - w))
    }

    /// Barrier factor `zeta(z) = 1 + e^{z^2 - r^2}`; ~1 inside the band,
    /// grows fast outside so the latent coordinate cannot run away. The
    /// exponent is clamped so the result stays finite for any `z`.
    pub fn zeta(&self, z: T) -> T {
        let r = self.band_radius;
        let e = (z * z - r * r).min(s(700.0));
        T::one() + e.exp()
    }

    /// Latent coordinate matching an outflow `w` in `(0, phi_m)`.
    pub fn init_z(&self, w: T) -> Result<T> {
        if w <= T::zero() || w >= self.phi_m {
            return Err(Error::SigmoidSource(format!(
                "initial outflow must lie strictly inside (0, phi_m); got {w:?}"
            )));
        }
        Ok((w / (self.phi_m - w)).ln())
    }

    /// Pick `rho_n` so the droop curve passes exactly through
    /// `(w0, rho0)`, making the sigmoid run start on the slack steady
    /// state.
    pub fn calibrate_rho_n(&mut self, w0: T, rho0: T) {
        self.rho_n = T::one();
        self.rho_n = rho0 / self.droop(w0);
    }
}

pub struct SigmoidSystem<T: Scalar> {
    pub dnet: Arc<DiscretizedNetwork<T>>,
    pub inputs: Arc<dyn Inputs<T>>,
    pub source: SigmoidSource<T>,
    /// Segment attached to the reservoir node and whether it leaves it.
    pub segment: usize,
    pub seg_leaves: bool,
    /// Reduced index of the latent-coordinate slot (the attached
    /// segment's flux state).
    pub k_red: usize,
    solver: UpdatableLu<T>,
    /// Compressor update columns: (node, base alpha). The droop column is
    /// appended after these in the solver's update list.
    update_nodes: Vec<(usize, T)>,
    alpha_buf: DVector<T>,
    ddot_buf: DVector<T>,
}

impl<T: Scalar> SigmoidSystem<T> {
    pub fn dim(&self) -> usize {
        self.dnet.state_dim() - 1
    }

    /// Outflow sign: +1 if the attached segment leaves the node.
    pub fn sigma(&self) -> T {
        if self.seg_leaves {
            T::one()
        } else {
            -T::one()
        }
    }

    /// Reservoir outflow at the given reduced state.
    pub fn outflow(&self, y: &DVector<T>) -> T {
        self.source.flux(y[self.k_red])
    }

    /// Algebraic reservoir density at the given reduced state.
    pub fn source_density(&self, y: &DVector<T>) -> T {
        self.source.droop(self.outflow(y))
    }

    /// Reduced state from a full state (latent slot holds `z`).
    pub fn reduce(&self, x: &StateVector<T>) -> Result<DVector<T>> {
        let n = self.dnet.n;
        let m = self.dnet.m;
        let s_node = self.source.node;
        let mut y = DVector::zeros(self.dim());
        for i in 0..n {
            if let Some(r) = reduced_index(s_node, i) {
                y[r] = x.rho[i];
            }
        }
        for j in 0..m {
            y[n - 1 + j] = x.phi0[j];
            y[n - 1 + m + j] = x.phil[j];
        }
        let w = self.sigma()
            * if self.seg_leaves {
                x.phi0[self.segment]
            } else {
                x.phil[self.segment]
            };
        y[self.k_red] = self.source.init_z(w)?;
        Ok(y)
    }

    /// Full state at the given reduced state: latent slot replaced by the
    /// signed flux, reservoir density from the droop curve.
    pub fn full_state(&self, y: &DVector<T>) -> StateVector<T> {
        let z = y[self.k_red];
        let w = self.source.flux(z);
        let rho_s = self.source.droop(w);
        let mut yf = y.clone();
        yf[self.k_red] = self.sigma() * w;
        expand_state(&self.dnet, self.source.node, rho_s, &yf)
    }

    pub fn alpha_at(&self, t: T) -> DVector<T> {
        let mut a = self.dnet.alpha.clone();
        self.inputs.alpha(t, &mut a);
        a
    }

    /// Reduced RHS. Solves `M_x5 xdot~ = G~` with
    /// `M_x5 = M_x4 + sigma h2(w) M_x3 e_k^T`, then converts the flux
    /// derivative into the latent-coordinate rate
    /// `zdot = xdot~_k / (sigma h1(z) zeta(z))`.
    pub fn rhs(&mut self, t: T, y: &DVector<T>, out: &mut DVector<T>) -> Result<()> {
        let dnet = self.dnet.clone();
        self.inputs.alpha(t, &mut self.alpha_buf);
        self.inputs.d_dot(t, &mut self.ddot_buf);
        let z = y[self.k_red];
        let w = self.source.flux(z);
        let rho_s = self.source.droop(w);
        let x = {
            let mut yf = y.clone();
            yf[self.k_red] = self.sigma() * w;
            expand_state(&dnet, self.source.node, rho_s, &yf)
        };
        let g = self.reduced_g(&dnet, &x)?;
        let mut scales: Vec<T> = self
            .update_nodes
            .iter()
            .map(|&(c, base)| self.alpha_buf[c] - base)
            .collect();
        let droop_gain = if self.seg_leaves {
            // the attached segment leaves the node: Gamma1 carries alpha_s
            self.sigma() * self.source.h2(w) * self.alpha_buf[self.source.node]
        } else {
            self.sigma() * self.source.h2(w)
        };
        scales.push(droop_gain);
        let xtdot = self.solver.solve(&scales, &g)?;
        out.copy_from(&xtdot);
        out[self.k_red] =
            xtdot[self.k_red] / (self.sigma() * self.source.h1(z) * self.source.zeta(z));
        Ok(())
    }

    fn reduced_g(&self, dnet: &DiscretizedNetwork<T>, x: &StateVector<T>) -> Result<DVector<T>> {
        let (n, m) = (dnet.n, dnet.m);
        let s_node = self.source.node;
        let mut g = DVector::zeros(n + 2 * m - 1);
        for i in 0..n {
            if i != s_node {
                g[reduced_index(s_node, i).unwrap()] = self.ddot_buf[i];
            }
        }
        for j in 0..m {
            g[reduced_index(s_node, n + j).unwrap()] = x.phi0[j] - x.phil[j];
            g[reduced_index(s_node, n + m + j).unwrap()] =
                segment_momentum_rhs(dnet, &self.alpha_buf, &x.rho, &x.phi0, &x.phil, j)?;
        }
        Ok(g)
    }
}

/// Build the sigmoid system. The reservoir node must be a leaf of the
/// refined network: the single attached segment carries the saturating
/// outflow, and its flux state becomes the latent coordinate.
pub fn build_sigmoid_system<T: Scalar>(
    dnet: Arc<DiscretizedNetwork<T>>,
    inputs: Arc<dyn Inputs<T>>,
    source: SigmoidSource<T>,
) -> Result<SigmoidSystem<T>> {
    let s_node = source.node;
    if s_node >= dnet.n {
        return Err(Error::UnknownNode(format!("node index {s_node}")));
    }
    if source.phi_m <= T::zero() || source.gamma <= T::zero() || source.rho_n <= T::zero() {
        return Err(Error::SigmoidSource(
            "phi_m, gamma and rho_n must be positive".into(),
        ));
    }
    let adj = dnet.adjacent_segments(s_node);
    if adj.len() != 1 {
        return Err(Error::SigmoidSource(format!(
            "reservoir node must have exactly one attached segment, found {}",
            adj.len()
        )));
    }
    let (segment, seg_leaves) = adj[0];
    let k_full = if seg_leaves {
        dnet.n + segment
    } else {
        dnet.n + dnet.m + segment
    };
    let k_red = reduced_index(s_node, k_full).unwrap();

    let mx4 = assemble_mx4(&dnet, &dnet.alpha, s_node);
    let mut update_nodes = Vec::new();
    let mut updates = Vec::new();
    for c in inputs.varying_alpha_nodes() {
        if c == s_node {
            continue;
        }
        let col = reduced_index(s_node, c).unwrap();
        let mut u = DVector::zeros(mx4.nrows());
        for (j, leaves) in dnet.adjacent_segments(c) {
            if leaves {
                let mass_row = reduced_index(s_node, dnet.n + j).unwrap();
                u[mass_row] = dnet.seg_len[j] * half::<T>();
            }
        }
        update_nodes.push((c, dnet.alpha[c]));
        updates.push((col, u));
    }
    // droop column: M_x3 (the deleted density column of Gamma1) placed at
    // the latent slot; its alpha_s factor is folded into the scale.
    let mut u_droop = DVector::zeros(mx4.nrows());
    let mass_row = reduced_index(s_node, dnet.n + segment).unwrap();
    u_droop[mass_row] = dnet.seg_len[segment] * half::<T>();
    updates.push((k_red, u_droop));

    let solver = UpdatableLu::new(mx4, updates)
        .map_err(|_| Error::Regularity("M_x4 is singular (Theorem 3 preconditions violated)".into()))?;
    let n = dnet.n;
    Ok(SigmoidSystem {
        alpha_buf: dnet.alpha.clone(),
        ddot_buf: DVector::zeros(n),
        dnet,
        inputs,
        source,
        segment,
        seg_leaves,
        k_red,
        solver,
        update_nodes,
    })
}

/// Explicitly assembled augmented mass matrix
/// `M_s = [[M_x5, 0], [-e_k^T, sigma h1 zeta]]` for the state `[x~; z]`.
/// Reference implementation used to validate the update-based solver.
pub fn assemble_ms<T: Scalar>(
    sys: &SigmoidSystem<T>,
    alpha: &DVector<T>,
    z: T,
) -> DMatrix<T> {
    let dnet = &sys.dnet;
    let s_node = sys.source.node;
    let red = dnet.state_dim() - 1;
    let mx4 = assemble_mx4(dnet, alpha, s_node);
    let mut ms = DMatrix::zeros(red + 1, red + 1);
    ms.view_mut((0, 0), (red, red)).copy_from(&mx4);
    let w = sys.source.flux(z);
    let alpha_s = alpha[s_node];
    let gain = if sys.seg_leaves {
        sys.sigma() * sys.source.h2(w) * alpha_s
    } else {
        sys.sigma() * sys.source.h2(w)
    };
    let mass_row = reduced_index(s_node, dnet.n + sys.segment).unwrap();
    ms[(mass_row, sys.k_red)] += gain * dnet.seg_len[sys.segment] * half::<T>();
    ms[(red, sys.k_red)] = -T::one();
    ms[(red, red)] = sys.sigma() * sys.source.h1(z) * sys.source.zeta(z);
    ms
}

/// Block inverse of [`assemble_ms`]: with `M_s = [[M5, 0], [-e_k^T, c]]`,
/// `M_s^{-1} = [[M5^{-1}, 0], [e_k^T M5^{-1} / c, 1/c]]`.
pub fn ms_block_inverse<T: Scalar>(
    sys: &SigmoidSystem<T>,
    alpha: &DVector<T>,
    z: T,
) -> Option<DMatrix<T>> {
    let red = sys.dim();
    let ms = assemble_ms(sys, alpha, z);
    let m5 = ms.view((0, 0), (red, red)).into_owned();
    let m5_inv = m5.try_inverse()?;
    let c = ms[(red, red)];
    if c == T::zero() {
        return None;
    }
    let mut inv = DMatrix::zeros(red + 1, red + 1);
    inv.view_mut((0, 0), (red, red)).copy_from(&m5_inv);
    for col in 0..red {
        inv[(red, col)] = m5_inv[(sys.k_red, col)] / c;
    }
    inv[(red, red)] = T::one() / c;
    Some(inv)
}
