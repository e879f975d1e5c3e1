//! Shared constructors for unit tests.

use crate::network::{
    build_network, discretize, DiscretizedNetwork, NetworkSpec, NodeKind, NodeSpec, PipeSpec,
    NETWORK_SCHEMA,
};

pub fn node(id: &str, alpha: f64, d: f64) -> NodeSpec {
    NodeSpec {
        id: id.into(),
        alpha,
        injection_kg_s: d,
        kind: if d > 0.0 {
            NodeKind::Source
        } else if d < 0.0 {
            NodeKind::Load
        } else {
            NodeKind::Junction
        },
    }
}

pub fn pipe(from: &str, to: &str, length_m: f64) -> PipeSpec {
    PipeSpec {
        from: from.into(),
        to: to.into(),
        length_m,
        diameter_m: 0.6,
        lambda: 0.01,
        wave_speed_m_s: 350.0,
        area_m2: None,
    }
}

/// Path graph n0 - n1 - ... with the given injections and uniform pipes.
pub fn path_spec(injections: &[f64], pipe_length_m: f64) -> NetworkSpec {
    let nodes = injections
        .iter()
        .enumerate()
        .map(|(i, &d)| node(&format!("n{i}"), 1.0, d))
        .collect();
    let pipes = (0..injections.len() - 1)
        .map(|i| pipe(&format!("n{i}"), &format!("n{}", i + 1), pipe_length_m))
        .collect();
    NetworkSpec {
        schema: NETWORK_SCHEMA.into(),
        nodes,
        pipes,
    }
}

pub fn path(injections: &[f64], pipe_length_m: f64, target_l: f64) -> DiscretizedNetwork<f64> {
    let net = build_network(path_spec(injections, pipe_length_m)).unwrap();
    discretize(&net, target_l).unwrap()
}
