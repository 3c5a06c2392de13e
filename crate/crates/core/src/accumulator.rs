//! High-precision gradient accumulator.
//!
//! Emulates the SRAM side of the hybrid scheme: every synapse has a 32-bit
//! signed fixed-point register `chi` counting quanta of `epsilon / 4096`.
//! Desired weight changes are accumulated there at full resolution and only
//! turned into device updates once they cross the threshold `epsilon`.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SignMatrix};

/// Fractional bits below the threshold.
pub const FRACTION_BITS: u32 = 12;
/// The threshold expressed in quanta.
pub const THRESHOLD_QUANTA: i32 = 1 << FRACTION_BITS;
/// Saturation bound; storage is symmetric so negation never overflows.
pub const CHI_MAX: i32 = i32::MAX;
pub const CHI_MIN: i32 = -i32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    rows: usize,
    cols: usize,
    threshold: f64,
    quantum: f64,
    chi: Vec<i32>,
}

impl GradientAccumulator {
    pub fn new(rows: usize, cols: usize, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::domain(format!("threshold must be positive, got {threshold}")));
        }
        Ok(Self {
            rows,
            cols,
            threshold,
            quantum: threshold / f64::from(THRESHOLD_QUANTA),
            chi: vec![0; rows * cols],
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn quantum(&self) -> f64 {
        self.quantum
    }

    /// Raw register contents in quanta.
    pub fn chi(&self) -> &[i32] {
        &self.chi
    }

    pub fn chi_mut(&mut self) -> &mut [i32] {
        &mut self.chi
    }

    /// Register contents in weight units.
    pub fn chi_weights(&self) -> Matrix {
        let data = self.chi.iter().map(|&q| f64::from(q) * self.quantum).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("shape is consistent")
    }

    /// Convert a weight change to quanta, rounding half to even and
    /// saturating to the register range.
    pub fn to_quanta(&self, delta: f64) -> i32 {
        let q = (delta / self.quantum).round_ties_even();
        // float-to-int `as` saturates
        (q as i32).max(CHI_MIN)
    }

    /// `chi += round(delta_w / quantum)`, saturating. No drain happens here.
    pub fn accumulate(&mut self, delta_w: &Matrix) -> Result<()> {
        if delta_w.shape() != (self.rows, self.cols) {
            return Err(Error::domain(format!(
                "update {:?} does not match accumulator {}x{}",
                delta_w.shape(),
                self.rows,
                self.cols
            )));
        }
        if !delta_w.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::domain("accumulator update contains non-finite values"));
        }
        let quantum = self.quantum;
        for (chi, &d) in self.chi.iter_mut().zip(delta_w.as_slice()) {
            if d == 0.0 {
                continue;
            }
            let q = ((d / quantum).round_ties_even() as i32).max(CHI_MIN);
            *chi = chi.saturating_add(q).max(CHI_MIN);
        }
        Ok(())
    }

    /// Multilevel drain: emit `trunc(chi / 4096)` pulses per entry and keep
    /// the remainder, so `pulses * 4096 + chi_after == chi_before` exactly.
    pub fn drain_multilevel(&mut self) -> Vec<i32> {
        self.chi
            .iter_mut()
            .map(|chi| {
                let p = *chi / THRESHOLD_QUANTA;
                *chi %= THRESHOLD_QUANTA;
                p
            })
            .collect()
    }

    /// Binary drain against the currently stored signs.
    ///
    /// An entry flips to `+1` when `chi >= 4096` and the bit is `-1`, and to
    /// `-1` when `chi <= -4096` and the bit is `+1`; a flipped entry's
    /// register resets to zero. Crossing the threshold in the direction the
    /// bit already points clamps the register to `±4095` without flipping.
    pub fn drain_binary(&mut self, signs: &SignMatrix) -> Result<Vec<i8>> {
        if signs.shape() != (self.rows, self.cols) {
            return Err(Error::domain(format!(
                "sign matrix {:?} does not match accumulator {}x{}",
                signs.shape(),
                self.rows,
                self.cols
            )));
        }
        let limit = THRESHOLD_QUANTA;
        Ok(self
            .chi
            .iter_mut()
            .zip(signs.as_slice())
            .map(|(chi, &s)| {
                if *chi >= limit {
                    if s < 0 {
                        *chi = 0;
                        1
                    } else {
                        *chi = limit - 1;
                        0
                    }
                } else if *chi <= -limit {
                    if s > 0 {
                        *chi = 0;
                        -1
                    } else {
                        *chi = -(limit - 1);
                        0
                    }
                } else {
                    0
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(threshold: f64, chi: i32) -> GradientAccumulator {
        let mut acc = GradientAccumulator::new(1, 1, threshold).unwrap();
        acc.chi_mut()[0] = chi;
        acc
    }

    #[test]
    fn accumulate_basics() {
        let mut acc = GradientAccumulator::new(1, 2, 0.01).unwrap();
        acc.accumulate(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(acc.chi(), &[0, 0]);
        acc.accumulate(&Matrix::from_vec(1, 2, vec![0.005, -0.0025]).unwrap())
            .unwrap();
        assert_eq!(acc.chi(), &[2048, -1024]);
        assert!(acc.accumulate(&Matrix::zeros(2, 1)).is_err());
        assert!(acc
            .accumulate(&Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap())
            .is_err());
        assert!(GradientAccumulator::new(1, 1, 0.0).is_err());
    }

    #[test]
    fn round_half_to_even() {
        let acc = GradientAccumulator::new(1, 1, 4096.0).unwrap();
        assert_eq!(acc.quantum(), 1.0);
        assert_eq!(acc.to_quanta(0.5), 0);
        assert_eq!(acc.to_quanta(1.5), 2);
        assert_eq!(acc.to_quanta(2.5), 2);
        assert_eq!(acc.to_quanta(-2.5), -2);
    }

    #[test]
    fn saturates_instead_of_wrapping() {
        let mut acc = GradientAccumulator::new(1, 2, 1.0).unwrap();
        let push = Matrix::from_vec(1, 2, vec![1e6, -1e6]).unwrap();
        for _ in 0..2000 {
            acc.accumulate(&push).unwrap();
            assert!(acc.chi()[0] > 0 && acc.chi()[1] < 0);
        }
        assert_eq!(acc.chi(), &[CHI_MAX, CHI_MIN]);
        let huge = Matrix::from_vec(1, 2, vec![1e300, -1e300]).unwrap();
        acc.accumulate(&huge).unwrap();
        assert_eq!(acc.chi(), &[CHI_MAX, CHI_MIN]);
    }

    #[test]
    fn multilevel_drain_examples() {
        let mut acc = single(0.01, 0);
        assert_eq!(acc.drain_multilevel(), vec![0]);
        let mut acc = single(0.01, 10240);
        assert_eq!(acc.drain_multilevel(), vec![2]);
        assert_eq!(acc.chi(), &[2048]);
        let mut acc = single(0.01, -10240);
        assert_eq!(acc.drain_multilevel(), vec![-2]);
        assert_eq!(acc.chi(), &[-2048]);
    }

    #[test]
    fn binary_drain_examples() {
        let minus = SignMatrix::filled(1, 1, -1).unwrap();
        let plus = SignMatrix::filled(1, 1, 1).unwrap();

        let mut acc = single(0.01, 0);
        assert_eq!(acc.drain_binary(&minus).unwrap(), vec![0]);

        let mut acc = single(0.01, 4096);
        assert_eq!(acc.drain_binary(&minus).unwrap(), vec![1]);
        assert_eq!(acc.chi(), &[0]);

        let mut acc = single(0.01, 4096);
        assert_eq!(acc.drain_binary(&plus).unwrap(), vec![0]);
        assert_eq!(acc.chi(), &[4095]);

        let mut acc = single(0.01, -5000);
        assert_eq!(acc.drain_binary(&plus).unwrap(), vec![-1]);
        assert_eq!(acc.chi(), &[0]);

        let mut acc = single(0.01, -5000);
        assert_eq!(acc.drain_binary(&minus).unwrap(), vec![0]);
        assert_eq!(acc.chi(), &[-4095]);

        let mut acc = single(0.01, 4095);
        assert_eq!(acc.drain_binary(&minus).unwrap(), vec![0]);
        assert_eq!(acc.chi(), &[4095]);

        assert!(acc.drain_binary(&SignMatrix::filled(2, 1, 1).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn multilevel_drain_conserves_and_bounds(chi in proptest::collection::vec(CHI_MIN..=CHI_MAX, 1..64)) {
            let mut acc = GradientAccumulator::new(1, chi.len(), 0.01).unwrap();
            acc.chi_mut().copy_from_slice(&chi);
            let p = acc.drain_multilevel();
            for ((&before, &after), &pulses) in chi.iter().zip(acc.chi()).zip(&p) {
                prop_assert_eq!(i64::from(pulses) * 4096 + i64::from(after), i64::from(before));
                prop_assert!(after.abs() < THRESHOLD_QUANTA);
                prop_assert!(after == 0 || after.signum() == before.signum());
            }
        }

        #[test]
        fn binary_drain_bounds(chi in proptest::collection::vec(CHI_MIN..=CHI_MAX, 1..64), seed in any::<u64>()) {
            let n = chi.len();
            let signs: Vec<i8> = (0..n).map(|i| if (seed >> (i % 64)) & 1 == 1 { 1 } else { -1 }).collect();
            let signs = SignMatrix::from_vec(1, n, signs).unwrap();
            let mut acc = GradientAccumulator::new(1, n, 0.01).unwrap();
            acc.chi_mut().copy_from_slice(&chi);
            let flips = acc.drain_binary(&signs).unwrap();
            for i in 0..n {
                prop_assert!(acc.chi()[i].abs() <= THRESHOLD_QUANTA - 1);
                if flips[i] != 0 {
                    prop_assert_eq!(acc.chi()[i], 0);
                    prop_assert_eq!(flips[i], -signs.as_slice()[i]);
                }
            }
        }

        #[test]
        fn sub_threshold_drain_is_a_no_op(chi in proptest::collection::vec(-(THRESHOLD_QUANTA - 1)..THRESHOLD_QUANTA, 1..64)) {
            let n = chi.len();
            let mut acc = GradientAccumulator::new(1, n, 0.01).unwrap();
            acc.chi_mut().copy_from_slice(&chi);
            prop_assert!(acc.drain_multilevel().iter().all(|&p| p == 0));
            prop_assert_eq!(acc.chi(), chi.as_slice());
            let flips = acc.drain_binary(&SignMatrix::filled(1, n, 1).unwrap()).unwrap();
            prop_assert!(flips.iter().all(|&f| f == 0));
            prop_assert_eq!(acc.chi(), chi.as_slice());
        }

        #[test]
        fn quantization_error_is_at_most_half_a_quantum(delta in -1.0f64..1.0) {
            let mut acc = GradientAccumulator::new(1, 1, 0.01).unwrap();
            acc.accumulate(&Matrix::from_vec(1, 1, vec![delta]).unwrap()).unwrap();
            let err = (f64::from(acc.chi()[0]) * acc.quantum() - delta).abs();
            prop_assert!(err <= acc.quantum() / 2.0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn running_sum_matches_compensated_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut acc = GradientAccumulator::new(1, 1, 0.01).unwrap();
        let q = acc.quantum();
        // Neumaier-compensated sum of the requested changes, in quanta.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        let mut rounded: i64 = 0;
        for n in 1..=10_000u32 {
            let d = rng.random_range(-0.02..0.02);
            acc.accumulate(&Matrix::from_vec(1, 1, vec![d]).unwrap()).unwrap();
            let x = d / q;
            let t = sum + x;
            comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
            sum = t;
            rounded += x.round_ties_even() as i64;
            let exact = sum + comp;
            assert_eq!(i64::from(acc.chi()[0]), rounded);
            assert!((f64::from(acc.chi()[0]) - exact).abs() <= f64::from(n) * 0.5 + 1e-6);
        }
    }
}
