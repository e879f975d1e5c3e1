//! Property suite: structural invariants of the discretization, the mass
//! matrices, steady states, and the sigmoid source, over randomly drawn
//! tree networks.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linepack_core::dynamics::{mass_matrix, rank_report, rhs_g, MassVariant};
use linepack_core::network::{
    build_matrices, build_network, discretize, DiscretizedNetwork, NetworkSpec, NodeKind,
    NodeSpec, PipeSpec,
};
use linepack_core::sigmoid::SigmoidSource;
use linepack_core::steady::solve_steady;

fn node(id: &str, d: f64) -> NodeSpec {
    NodeSpec {
        id: id.into(),
        alpha: 1.0,
        injection_kg_s: d,
        kind: NodeKind::Junction,
    }
}

fn pipe(from: &str, to: &str, length_m: f64, diameter_m: f64) -> PipeSpec {
    PipeSpec {
        from: from.into(),
        to: to.into(),
        length_m,
        diameter_m,
        lambda: 0.01,
        wave_speed_m_s: 350.0,
        area_m2: None,
    }
}

/// Random tree with `n_phys` physical nodes, pipe lengths that are
/// multiples of 5 km, optional compressors, and balanced injections.
fn random_tree(n_phys: usize, seed: u64, with_compressors: bool) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![node("n0", 0.0)];
    let mut pipes = Vec::new();
    let mut total = 0.0;
    for i in 1..n_phys {
        let parent = rng.gen_range(0..i);
        let segs = rng.gen_range(1..=4usize) as f64;
        let diameter = if rng.gen_bool(0.5) { 0.6 } else { 0.9 };
        let d = rng.gen_range(-8.0..8.0);
        total += d;
        let mut nd = node(&format!("n{i}"), d);
        if with_compressors && rng.gen_bool(0.2) {
            nd.alpha = rng.gen_range(1.05..1.4);
        }
        nodes.push(nd);
        pipes.push(pipe(
            &format!("n{parent}"),
            &format!("n{i}"),
            segs * 5000.0,
            diameter,
        ));
    }
    nodes[0].injection_kg_s = -total;
    NetworkSpec {
        schema: "linepack-net/1".into(),
        nodes,
        pipes,
    }
}

fn build(spec: &NetworkSpec, target_l: f64) -> DiscretizedNetwork<f64> {
    discretize(&build_network(spec.clone()).unwrap(), target_l).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Tree counts, incidence column sums, intermediate-node neutrality,
    /// equal segment lengths, and the diagonal-positivity of the
    /// friction/storage coefficient matrices.
    #[test]
    fn discretization_invariants(n_phys in 3usize..14, seed in any::<u64>()) {
        let spec = random_tree(n_phys, seed, true);
        let dnet = build(&spec, 5000.0);
        prop_assert!(dnet.is_tree);
        prop_assert_eq!(dnet.n, dnet.m + 1);

        // each segment leaves one node and enters one node
        let e = dnet.incidence();
        for j in 0..dnet.m {
            let mut sum = 0.0;
            let mut abs_sum = 0.0;
            for i in 0..dnet.n {
                sum += e[(j, i)];
                abs_sum += e[(j, i)].abs();
            }
            prop_assert_eq!(sum, 0.0);
            prop_assert_eq!(abs_sum, 2.0);
        }

        // the entry/exit selectors differ exactly by the unsigned incidence
        let ms = build_matrices(&dnet);
        for i in 0..dnet.n {
            for j in 0..dnet.m {
                let diff = ms.k0bar[(i, j)] - ms.klbar[(i, j)];
                prop_assert_eq!(diff, e[(j, i)].abs());
            }
        }
        for j in 0..dnet.m {
            prop_assert_eq!(ms.gamma2[j], dnet.seg_len[j] / 2.0);
            prop_assert!(ms.gamma2[j] > 0.0);
            let g4 = dnet.seg_len[j] * dnet.seg_lambda[j] / (4.0 * dnet.seg_diam[j]);
            prop_assert!((ms.gamma4[j] - g4).abs() <= 1e-12 * g4);
            prop_assert!(ms.gamma4[j] > 0.0);
        }

        // discretization-born nodes are passive
        for i in dnet.n_physical..dnet.n {
            prop_assert_eq!(dnet.alpha[i], 1.0);
            prop_assert_eq!(dnet.injection[i], 0.0);
        }

        // every pipe splits into N = ceil(L / target) equal sub-lengths
        for (p, segs) in dnet.pipe_segments.iter().enumerate() {
            let length = spec.pipes[p].length_m;
            let n_segs = (length / 5000.0).ceil() as usize;
            prop_assert_eq!(segs.len(), n_segs);
            for &sidx in segs {
                let l = dnet.seg_len[sidx];
                prop_assert!((l - length / n_segs as f64).abs() < 1e-9);
            }
        }
    }

    /// Halving the target segment length doubles the segment count (pipe
    /// lengths here are multiples of the target) and preserves the tree
    /// relation n = m + 1.
    #[test]
    fn refinement_preserves_tree(n_phys in 3usize..12, seed in any::<u64>()) {
        let spec = random_tree(n_phys, seed, true);
        let coarse = build(&spec, 5000.0);
        let fine = build(&spec, 2500.0);
        prop_assert!(fine.is_tree);
        prop_assert_eq!(fine.m, 2 * coarse.m);
        prop_assert_eq!(fine.n, fine.m + 1);
    }

    /// The full mass matrix of a tree is rank deficient by exactly one,
    /// and the numerical rank always lies within [0, dim].
    #[test]
    fn full_mass_matrix_deficiency_one(n_phys in 3usize..10, seed in any::<u64>()) {
        let spec = random_tree(n_phys, seed, true);
        let dnet = build(&spec, 5000.0);
        let ms = build_matrices(&dnet);
        let full = mass_matrix(&dnet, &ms, MassVariant::Full).unwrap();
        let report = rank_report(&full.matrix);
        prop_assert!(report.numerical_rank <= report.dim);
        prop_assert_eq!(report.numerical_rank, dnet.n + 2 * dnet.m - 1);
        prop_assert_eq!(report.deficiency, 1);
    }

    /// Steady states returned by the solver annihilate the dynamics right
    /// hand side in the infinity norm.
    #[test]
    fn steady_state_residual_vanishes(n_phys in 3usize..10, seed in any::<u64>()) {
        let spec = random_tree(n_phys, seed, false);
        let dnet = build(&spec, 5000.0);
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        let g = rhs_g(&dnet, &dnet.alpha, &x, &DVector::zeros(dnet.n)).unwrap();
        prop_assert!(g.amax() < 1e-9, "residual {:.2e}", g.amax());
        for i in 0..dnet.n {
            prop_assert!(x.rho[i] > 0.0);
        }
    }

    /// Along a compressor-free segment carrying positive flux, density
    /// strictly decreases in the flow direction at steady state.
    #[test]
    fn steady_density_decreases_along_flow(
        hops in 2usize..7,
        draw in 5.0f64..40.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![node("n0", draw)];
        let mut pipes = Vec::new();
        for i in 1..=hops {
            nodes.push(node(&format!("n{i}"), if i == hops { -draw } else { 0.0 }));
            let segs = rng.gen_range(1..=3usize) as f64;
            pipes.push(pipe(&format!("n{}", i - 1), &format!("n{i}"), segs * 5000.0, 0.9));
        }
        let spec = NetworkSpec { schema: "linepack-net/1".into(), nodes, pipes };
        let dnet = build(&spec, 5000.0);
        let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, 0, 60.0).unwrap();
        for j in 0..dnet.m {
            if x.phi0[j] > 0.0 {
                prop_assert!(
                    x.rho[dnet.seg_start[j]] > x.rho[dnet.seg_end[j]],
                    "segment {} not monotone", j
                );
            }
        }
    }

    /// The sigmoid source keeps its injection inside (0, phi_m), its
    /// parameterization monotone (h1 > 0, h2 < 0), and its band guard
    /// zeta >= 1 with zeta(+/-r) = 2.
    #[test]
    fn sigmoid_source_bounds(
        phi_m in 50.0f64..500.0,
        gamma in 0.01f64..0.5,
        r in 1.0f64..20.0,
        // |z| capped where 1 - S(z) still clears f64 resolution, so the
        // strict ceiling remains representable
        z in -30.0f64..30.0,
        frac in 0.01f64..0.99,
    ) {
        let source = SigmoidSource::<f64> {
            node: 0,
            phi_m,
            phi_mid: phi_m * 1.05,
            gamma,
            rho_n: 60.0,
            band_radius: r,
        };
        let w = source.flux(z);
        prop_assert!(w > 0.0 && w < phi_m, "flux {w} outside (0, {phi_m})");
        prop_assert!(source.h1(z) > 0.0);
        prop_assert!(source.h2(frac * phi_m) < 0.0);
        prop_assert!(source.zeta(z) >= 1.0);
        prop_assert!((source.zeta(r) - 2.0).abs() < 1e-12);
        prop_assert!((source.zeta(-r) - 2.0).abs() < 1e-12);
    }
}
