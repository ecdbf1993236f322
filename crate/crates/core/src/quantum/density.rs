//! Small dense density matrices for the mixed-state checks: adversary view
//! averaging, trace-distance bounds, and physicality validation.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const HERMITICITY_TOLERANCE: f64 = 1e-12;
const TRACE_TOLERANCE: f64 = 1e-9;
const POSITIVITY_TOLERANCE: f64 = 1e-9;

/// A validated density matrix over `k` qubits (dimension 2^k), indexed with
/// the same low-bit-first convention as [`super::StateVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: DMatrix<Complex64>,
}

impl DensityMatrix {
    /// Wraps a raw matrix after checking Hermiticity, unit trace, and
    /// positivity.
    pub fn from_matrix(mat: DMatrix<Complex64>) -> Result<Self> {
        let rho = DensityMatrix { mat };
        rho.validate()?;
        Ok(rho)
    }

    /// Rank-one density matrix of a pure state.
    pub fn from_pure(amps: &[Complex64]) -> Result<Self> {
        let dim = amps.len();
        if !dim.is_power_of_two() {
            return Err(Error::DimensionMismatch {
                expected: dim.next_power_of_two(),
                actual: dim,
            });
        }
        let mut mat = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                mat[(i, j)] = amps[i] * amps[j].conj();
            }
        }
        Self::from_matrix(mat)
    }

    /// The maximally mixed state on `n_qubits`.
    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        let mat = DMatrix::identity(dim, dim) * Complex64::new(1.0 / dim as f64, 0.0);
        DensityMatrix { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).sum()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.mat[(i, j)]
    }

    /// Checks the physicality conditions: Hermitian, unit trace, and
    /// positive semidefinite within numerical tolerance.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.mat.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.mat.ncols(),
            });
        }
        for i in 0..dim {
            for j in 0..dim {
                let drift = (self.mat[(i, j)] - self.mat[(j, i)].conj()).norm();
                if drift > HERMITICITY_TOLERANCE {
                    return Err(Error::Numerical(format!(
                        "density matrix not Hermitian at ({i},{j}): drift {drift:.3e}"
                    )));
                }
            }
        }
        let trace = self.trace();
        if (trace - 1.0).abs() > TRACE_TOLERANCE {
            return Err(Error::Numerical(format!(
                "density matrix trace {trace} differs from 1"
            )));
        }
        let eigen = self.mat.clone().symmetric_eigen();
        let min = eigen.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -POSITIVITY_TOLERANCE {
            return Err(Error::Numerical(format!(
                "density matrix has negative eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    }

    /// Fidelity `<target| rho |target>` against a pure target state.
    pub fn fidelity_with_pure(&self, target: &[Complex64]) -> Result<f64> {
        if target.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: target.len(),
            });
        }
        let mut acc = Complex64::ZERO;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                acc += target[i].conj() * self.mat[(i, j)] * target[j];
            }
        }
        Ok(acc.re)
    }

    /// Trace distance `(1/2) * tr |rho - sigma|`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let diff = &self.mat - &other.mat;
        let eigen = diff.symmetric_eigen();
        Ok(0.5 * eigen.eigenvalues.iter().map(|l| l.abs()).sum::<f64>())
    }
}

/// Accumulates a probability-weighted mixture of pure states and validates
/// the total at the end.
#[derive(Clone, Debug)]
pub struct MixtureAccumulator {
    mat: DMatrix<Complex64>,
    weight: f64,
}

impl MixtureAccumulator {
    pub fn new(dim: usize) -> Self {
        MixtureAccumulator {
            mat: DMatrix::zeros(dim, dim),
            weight: 0.0,
        }
    }

    pub fn add_pure(&mut self, weight: f64, amps: &[Complex64]) -> Result<()> {
        if amps.len() != self.mat.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.mat.nrows(),
                actual: amps.len(),
            });
        }
        let w = Complex64::new(weight, 0.0);
        for i in 0..amps.len() {
            for j in 0..amps.len() {
                self.mat[(i, j)] += w * amps[i] * amps[j].conj();
            }
        }
        self.weight += weight;
        Ok(())
    }

    pub fn add_density(&mut self, weight: f64, rho: &DensityMatrix) -> Result<()> {
        if rho.dim() != self.mat.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.mat.nrows(),
                actual: rho.dim(),
            });
        }
        let w = Complex64::new(weight, 0.0);
        for i in 0..rho.dim() {
            for j in 0..rho.dim() {
                self.mat[(i, j)] += w * rho.entry(i, j);
            }
        }
        self.weight += weight;
        Ok(())
    }

    /// Normalizes by total weight and validates the result.
    pub fn finish(self) -> Result<DensityMatrix> {
        if self.weight <= 0.0 {
            return Err(Error::Numerical("empty mixture".into()));
        }
        let mat = self.mat * Complex64::new(1.0 / self.weight, 0.0);
        DensityMatrix::from_matrix(mat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::state::bell_amplitudes;
    use crate::quantum::BellLabel;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pure_states_validate_and_have_unit_self_fidelity() {
        let amps = bell_amplitudes(BellLabel::new(1, 0));
        let rho = DensityMatrix::from_pure(&amps).unwrap();
        assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.fidelity_with_pure(&amps).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_distance_separates_orthogonal_states_maximally() {
        let a = DensityMatrix::from_pure(&bell_amplitudes(BellLabel::new(0, 0))).unwrap();
        let b = DensityMatrix::from_pure(&bell_amplitudes(BellLabel::new(1, 0))).unwrap();
        assert_abs_diff_eq!(a.trace_distance(&b).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.trace_distance(&a).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_bell_mixture_is_maximally_mixed() {
        let mut acc = MixtureAccumulator::new(4);
        for label in BellLabel::ALL {
            acc.add_pure(0.25, &bell_amplitudes(label)).unwrap();
        }
        let rho = acc.finish().unwrap();
        let dist = rho
            .trace_distance(&DensityMatrix::maximally_mixed(2))
            .unwrap();
        assert_abs_diff_eq!(dist, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unphysical_matrices_are_rejected()  {
        let mut mat = DMatrix::<Complex64>::zeros(2, 2);
        mat[(0, 0)] = Complex64::new(1.5, 0.0);
        mat[(1, 1)] = Complex64::new(-0.5, 0.0);
        assert!(DensityMatrix::from_matrix(mat).is_err());
    }
}
