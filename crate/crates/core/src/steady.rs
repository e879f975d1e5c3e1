//! Consistent initial equilibria: `G(x*) = 0` from injections, compressor
//! ratios, and one anchor density.
//!
//! On a tree the steady fluxes are uniquely fixed by conservation
//! (subtree injection sums), and the momentum relations become
//! triangular: starting at the anchor, every segment determines its far
//! endpoint density through one scalar equation, solved here by Newton
//! from the closed-form frictionless-compressor initializer. Each row is
//! driven below the 1e-9 residual target independently.

use nalgebra::DVector;

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::network::DiscretizedNetwork;
use crate::scalar::{s, Scalar};

/// Momentum residual of one segment with zero time derivatives:
/// `a^2 (alpha_u rho_u - rho_v) - (l lambda / 4D) F / (alpha_u rho_u + rho_v)`.
fn row_residual<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    j: usize,
    rho_u: T,
    rho_v: T,
    phi: T,
) -> T {
    let a = dnet.seg_wave[j];
    let g4 = dnet.seg_len[j] * dnet.seg_lambda[j] / (s::<T>(4.0) * dnet.seg_diam[j]);
    let au = alpha[dnet.seg_start[j]];
    let fsum = phi + phi;
    let f = fsum * fsum.abs();
    let dp = au.mul_add(rho_u, -rho_v);
    let denom = au.mul_add(rho_u, rho_v);
    a * a * dp - g4 * f / denom
}

/// Solve one steady momentum row for the unknown endpoint density.
/// `solve_for_end = true` finds rho_v given rho_u, otherwise the reverse.
fn propagate_density<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
    j: usize,
    known: T,
    phi: T,
    solve_for_end: bool,
) -> Result<T> {
    let a = dnet.seg_wave[j];
    let g4 = dnet.seg_len[j] * dnet.seg_lambda[j] / (s::<T>(4.0) * dnet.seg_diam[j]);
    let au = alpha[dnet.seg_start[j]];
    let fsum = phi + phi;
    let f = fsum * fsum.abs();
    // frictionless-squared relation: (au rho_u)^2 - rho_v^2 = g4 F / a^2
    let drop = g4 * f / (a * a);
    let infeasible = || {
        Error::Infeasible(format!(
            "steady density would be non-positive across segment {j}"
        ))
    };
    let mut x = if solve_for_end {
        let w = au * known;
        let arg = w * w - drop;
        if arg <= T::zero() {
            return Err(infeasible());
        }
        arg.sqrt()
    } else {
        let arg = known * known + drop;
        if arg <= T::zero() {
            return Err(infeasible());
        }
        arg.sqrt() / au
    };
    // Scalar Newton polish on the exact row residual. The attainable
    // floor is |dg| * ulp(x) / 2, which can sit above 1e-10 for stiff
    // rows; once the iterate stops moving, the best residual seen is
    // accepted if it clears the 1e-9 row target.
    let mut best = (x, T::max_value().unwrap());
    for _ in 0..50 {
        let (rho_u, rho_v) = if solve_for_end { (known, x) } else { (x, known) };
        let g = row_residual(dnet, alpha, j, rho_u, rho_v, phi);
        if g.abs() < s(1e-10) {
            return Ok(x);
        }
        if g.abs() < best.1 {
            best = (x, g.abs());
        }
        let denom = au.mul_add(rho_u, rho_v);
        let dg = if solve_for_end {
            -a * a + g4 * f / (denom * denom)
        } else {
            au * (a * a + g4 * f / (denom * denom))
        };
        let step = g / dg;
        let next = x - step;
        if next == x {
            break;
        }
        x = next;
        if x <= T::zero() {
            return Err(infeasible());
        }
    }
    if best.1 < s(1e-9) {
        return Ok(best.0);
    }
    Err(Error::NewtonFailure(format!(
        "steady momentum row of segment {j} did not converge"
    )))
}

/// Steady fluxes on a tree: the flow through each segment equals the net
/// injection of the component on its start side.
pub fn steady_fluxes<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    d: &DVector<T>,
) -> Result<DVector<T>> {
    if !dnet.is_tree {
        return Err(Error::NotATree);
    }
    let total: T = d.iter().fold(T::zero(), |acc, &x| acc + x);
    let scale = d.iter().fold(T::one(), |acc, &x| acc.max(x.abs()));
    if total.abs() > s::<T>(1e-9) * scale {
        return Err(Error::UnbalancedInjections(
            num_traits::ToPrimitive::to_f64(&total).unwrap_or(f64::NAN),
        ));
    }
    // iterative post-order: accumulate subtree injection sums from node 0
    let n = dnet.n;
    let mut parent_edge = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0usize];
    let mut seen = vec![false; n];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        order.push(v);
        for (j, leaves) in dnet.adjacent_segments(v) {
            let w = if leaves { dnet.seg_end[j] } else { dnet.seg_start[j] };
            if !seen[w] {
                seen[w] = true;
                parent[w] = v;
                parent_edge[w] = j;
                stack.push(w);
            }
        }
    }
    let mut subtree: Vec<T> = (0..n).map(|i| d[i]).collect();
    for &v in order.iter().rev() {
        if parent[v] != usize::MAX {
            let add = subtree[v];
            subtree[parent[v]] += add;
        }
    }
    let mut phi = DVector::zeros(dnet.m);
    for v in 0..n {
        let j = parent_edge[v];
        if j == usize::MAX {
            continue;
        }
        // flow out of v's subtree equals its injection sum; sign follows
        // the segment orientation
        let flow = subtree[v];
        phi[j] = if dnet.seg_start[j] == v {
            flow / dnet.seg_area[j]
        } else {
            -flow / dnet.seg_area[j]
        };
    }
    Ok(phi)
}

/// Equilibrium state from injections `d`, ratios `alpha`, and one anchored
/// density. Every momentum row of the result satisfies
/// `|residual| < 1e-9` and every density is positive.
pub fn solve_steady<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    d: &DVector<T>,
    alpha: &DVector<T>,
    anchor_node: usize,
    anchor_density: T,
) -> Result<StateVector<T>> {
    if anchor_node >= dnet.n {
        return Err(Error::UnknownNode(format!("node index {anchor_node}")));
    }
    if anchor_density <= T::zero() {
        return Err(Error::NonPositiveParameter("anchor density".into()));
    }
    let phi = steady_fluxes(dnet, d)?;
    let n = dnet.n;
    let mut rho = DVector::zeros(n);
    let mut known = vec![false; n];
    rho[anchor_node] = anchor_density;
    known[anchor_node] = true;
    let mut queue = std::collections::VecDeque::from([anchor_node]);
    while let Some(v) = queue.pop_front() {
        for (j, leaves) in dnet.adjacent_segments(v) {
            let w = if leaves { dnet.seg_end[j] } else { dnet.seg_start[j] };
            if known[w] {
                continue;
            }
            rho[w] = propagate_density(dnet, alpha, j, rho[v], phi[j], leaves)?;
            known[w] = true;
            queue.push_back(w);
        }
    }
    if known.iter().any(|k| !k) {
        return Err(Error::Disconnected);
    }
    Ok(StateVector {
        rho,
        phi0: phi.clone(),
        phil: phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rhs_g;
    use crate::network::{build_network, discretize};
    use crate::testutil;

    #[test]
    fn zero_injections_uniform_density() {
        let dnet = testutil::path(&[0.0, 0.0, 0.0], 10_000.0, 5000.0);
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        for i in 0..dnet.n {
            assert!((x.rho[i] - 60.0).abs() < 1e-12);
        }
        assert!(x.phi0.amax() < 1e-12);
    }

    #[test]
    fn compressor_amplifies_downstream_start() {
        let mut spec = testutil::path_spec(&[0.0, 0.0], 5000.0);
        spec.nodes[0].alpha = 1.3028;
        let dnet: crate::network::DiscretizedNetwork<f64> =
            discretize(&build_network(spec).unwrap(), 5000.0).unwrap();
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        // zero flow: the far end carries the amplified density
        assert!((x.rho[1] - 1.3028 * 60.0).abs() < 1e-9);
    }

    #[test]
    fn single_segment_matches_closed_form() {
        // rho_l^2 = rho_0^2 - l lambda / (a^2 D) phi |phi|
        let dnet = testutil::path(&[0.0, 0.0], 5000.0, 5000.0);
        let area = dnet.seg_area[0];
        let inj = 100.0 * area;
        let d = nalgebra::DVector::from_vec(vec![inj, -inj]);
        let x = solve_steady(&dnet, &d, &dnet.alpha, 0, 60.0).unwrap();
        let expected = (60.0f64.powi(2) - 5000.0 * 0.01 / (350.0f64.powi(2) * 0.6) * 100.0 * 100.0)
            .sqrt();
        assert!((expected - 59.9433).abs() < 1e-4, "check the hand value");
        assert!(
            (x.rho[1] - expected).abs() < 1e-9,
            "{} vs {expected}",
            x.rho[1]
        );
    }

    #[test]
    fn residual_below_1e9_on_refined_path() {
        let dnet = testutil::path(&[80.0, -30.0, -50.0], 20_000.0, 5000.0);
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        let g = rhs_g(&dnet, &dnet.alpha, &x, &nalgebra::DVector::zeros(dnet.n)).unwrap();
        assert!(g.amax() < 1e-9, "residual {}", g.amax());
    }

    #[test]
    fn densities_decrease_along_positive_flow() {
        let dnet = testutil::path(&[50.0, 0.0, -50.0], 20_000.0, 5000.0);
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        // walk the pipes in flow direction
        for segs in &dnet.pipe_segments {
            for &j in segs {
                assert!(x.rho[dnet.seg_start[j]] > x.rho[dnet.seg_end[j]]);
            }
        }
    }

    #[test]
    fn anchor_in_the_middle_is_consistent() {
        let dnet = testutil::path(&[40.0, 0.0, -40.0], 10_000.0, 5000.0);
        let x0 = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        let mid = dnet.node_by_id("n1").unwrap();
        let x1 = solve_steady(&dnet, &dnet.injection, &dnet.alpha, mid, x0.rho[mid]).unwrap();
        assert!((&x1.rho - &x0.rho).amax() < 1e-8);
    }

    #[test]
    fn unbalanced_injections_rejected() {
        let dnet = testutil::path(&[10.0, 0.0], 5000.0, 5000.0);
        let d = nalgebra::DVector::from_vec(vec![10.0, 0.0]);
        assert!(matches!(
            solve_steady(&dnet, &d, &dnet.alpha, 0, 60.0),
            Err(Error::UnbalancedInjections(_))
        ));
    }

    #[test]
    fn infeasible_draw_detected() {
        // enormous flux over a long pipe: density would cross zero
        let dnet = testutil::path(&[0.0, 0.0], 100_000.0, 5000.0);
        let area = dnet.seg_area[0];
        let inj = 2000.0 * area;
        let mut d = nalgebra::DVector::zeros(dnet.n);
        d[dnet.node_by_id("n0").unwrap()] = inj;
        d[dnet.node_by_id("n1").unwrap()] = -inj;
        assert!(matches!(
            solve_steady(&dnet, &d, &dnet.alpha, 0, 30.0),
            Err(Error::Infeasible(_))
        ));
    }
}
