//! Exogenous model inputs: injection-rate schedules and compressor ratios.

use nalgebra::DVector;

use crate::network::DiscretizedNetwork;
use crate::scalar::Scalar;

/// Time-dependent drivers seen by the technique systems. Load ramps enter
/// through `d_dot` (piecewise constant); compressor transitions through
/// `alpha`.
pub trait Inputs<T: Scalar>: Send + Sync {
    /// Injection rate vector (kg/s^2) over refined nodes at time `t`.
    fn d_dot(&self, t: T, out: &mut DVector<T>);
    /// Compressor ratios over refined nodes at time `t`.
    fn alpha(&self, t: T, out: &mut DVector<T>);
    /// Refined node indices whose alpha varies over the run.
    fn varying_alpha_nodes(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// Constant ratios, zero injection rates.
pub struct ConstantInputs<T: Scalar> {
    pub alpha: DVector<T>,
}

impl<T: Scalar> ConstantInputs<T> {
    pub fn from_network(dnet: &DiscretizedNetwork<T>) -> Self {
        Self {
            alpha: dnet.alpha.clone(),
        }
    }
}

impl<T: Scalar> Inputs<T> for ConstantInputs<T> {
    fn d_dot(&self, _t: T, out: &mut DVector<T>) {
        out.fill(T::zero());
    }

    fn alpha(&self, _t: T, out: &mut DVector<T>) {
        out.copy_from(&self.alpha);
    }
}
