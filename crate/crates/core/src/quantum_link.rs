//! Statistical model of the two-party direction-estimation link.
//!
//! The sender prepares `3n` qubits whose Bloch vectors point along the
//! direction to transmit; the receiver measures the first `n` with σx, the
//! next `n` with σy and the last `n` with σz in its own frame, and rebuilds the
//! direction from the `+1` frequencies.
//!
//! Measurement is simulated per (segment × axis) cell with one binomial draw,
//! which has exactly the law of the per-qubit Bernoulli loop. That keeps
//! `n ≈ 10⁸` tractable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Direction, Frame, Vec3, TOLERANCE};

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("Bloch vector length {0} exceeds 1")]
    InvalidBloch(f64),
    #[error("depolarizing probability {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("qubits per axis must be at least 1")]
    ZeroQubits,
    #[error("segment with zero qubits")]
    EmptySegment,
    #[error("message carries {got} qubits, expected {expected}")]
    CountMismatch { expected: u64, got: u64 },
}

/// Bloch vector of a (possibly mixed) qubit state, `|r| ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct BlochState(Vec3);

impl BlochState {
    pub const MAXIMALLY_MIXED: BlochState = BlochState(Vec3::ZERO);

    pub fn new(r: Vec3) -> Result<Self, LinkError> {
        let len = r.norm();
        if !len.is_finite() || len > 1.0 + TOLERANCE {
            return Err(LinkError::InvalidBloch(len));
        }
        Ok(BlochState(r))
    }

    pub fn pure(d: Direction) -> Self {
        BlochState(d.vec())
    }

    pub fn vector(self) -> Vec3 {
        self.0
    }

    /// Re-expresses the state from `frame`-local to global coordinates.
    pub fn to_global(self, frame: &Frame) -> BlochState {
        BlochState(frame.apply(self.0))
    }

    pub fn to_local(self, frame: &Frame) -> BlochState {
        BlochState(frame.apply_transpose(self.0))
    }
}

impl TryFrom<[f64; 3]> for BlochState {
    type Error = LinkError;
    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        BlochState::new(a.into())
    }
}

impl From<BlochState> for [f64; 3] {
    fn from(s: BlochState) -> Self {
        s.0.to_array()
    }
}

/// Depolarizing probability and qubits per measurement axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub epsilon: f64,
    pub n: u64,
}

impl ChannelParams {
    pub fn new(epsilon: f64, n: u64) -> Result<Self, LinkError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(LinkError::InvalidEpsilon(epsilon));
        }
        if n == 0 {
            return Err(LinkError::ZeroQubits);
        }
        Ok(Self { epsilon, n })
    }

    pub fn noiseless(n: u64) -> Result<Self, LinkError> {
        Self::new(0.0, n)
    }

    /// Qubits in one transmission.
    pub fn batch_size(&self) -> u64 {
        3 * self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: BlochState,
    pub count: u64,
}

/// An ordered batch of qubits, as runs of identical states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumMessage {
    pub segments: Vec<Segment>,
}

impl QuantumMessage {
    /// What an honest sender emits: `3n` copies of `d`.
    pub fn honest(d: Direction, n: u64) -> Self {
        QuantumMessage {
            segments: vec![Segment { state: BlochState::pure(d), count: 3 * n }],
        }
    }

    pub fn total(&self) -> u64 {
        self.segments.iter().fold(0u64, |acc, s| acc.saturating_add(s.count))
    }

    pub fn validate(&self, n: u64) -> Result<(), LinkError> {
        if self.segments.iter().any(|s| s.count == 0) {
            return Err(LinkError::EmptySegment);
        }
        for s in &self.segments {
            BlochState::new(s.state.vector())?;
        }
        let got = self.total();
        if got != 3 * n {
            return Err(LinkError::CountMismatch { expected: 3 * n, got });
        }
        Ok(())
    }

    /// Maps every segment state from `frame`-local to global coordinates.
    pub fn to_global(&self, frame: &Frame) -> QuantumMessage {
        QuantumMessage {
            segments: self
                .segments
                .iter()
                .map(|s| Segment { state: s.state.to_global(frame), count: s.count })
                .collect(),
        }
    }
}

/// Counts of `+1` outcomes on the σx, σy, σz groups, `n` qubits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementTally {
    pub k: [u64; 3],
    pub n: u64,
}

impl MeasurementTally {
    pub fn new(k: [u64; 3], n: u64) -> Result<Self, LinkError> {
        if n == 0 {
            return Err(LinkError::ZeroQubits);
        }
        if let Some(&bad) = k.iter().find(|&&k| k > n) {
            return Err(LinkError::CountMismatch { expected: n, got: bad });
        }
        Ok(Self { k, n })
    }

    /// `+1` frequency on each axis.
    pub fn frequencies(&self) -> [f64; 3] {
        self.k.map(|k| k as f64 / self.n as f64)
    }
}

/// Result of decoding a tally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub direction: Direction,
    /// All three frequencies were exactly 1/2; `direction` is the local +z
    /// sentinel.
    pub degenerate: bool,
}

/// Depolarizing channel on a Bloch vector: `r ↦ (1−ε)·r`.
pub fn depolarize(s: BlochState, epsilon: f64) -> BlochState {
    BlochState(s.0 * (1.0 - epsilon))
}

/// Probability of `+1` when measuring spin along `axis`: `(1 + r·axis)/2`.
pub fn outcome_probability(s: BlochState, axis: Direction) -> f64 {
    ((1.0 + s.0.dot(axis.vec())) / 2.0).clamp(0.0, 1.0)
}

/// Simulates the receiver's measurements on a batch whose states are given in
/// global coordinates.
pub fn measure_batch<R: Rng + ?Sized>(
    msg: &QuantumMessage,
    receiver: &Frame,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<MeasurementTally, LinkError> {
    msg.validate(params.n)?;
    let n = params.n;
    let mut k = [0u64; 3];
    let mut start = 0u64;
    for seg in &msg.segments {
        let end = start + seg.count;
        let state = depolarize(seg.state, params.epsilon);
        for (axis, k_axis) in k.iter_mut().enumerate() {
            let lo = axis as u64 * n;
            let hi = lo + n;
            let overlap = end.min(hi).saturating_sub(start.max(lo));
            if overlap == 0 {
                continue;
            }
            let p = outcome_probability(state, receiver.axis(axis));
            // one substream per cell so a rounding-level change in p never
            // shifts the draws of later cells
            let mut cell = ChaCha8Rng::seed_from_u64(rng.random());
            *k_axis += sample_binomial(overlap, p, &mut cell);
        }
        start = end;
    }
    MeasurementTally::new(k, n)
}

fn sample_binomial<R: Rng + ?Sized>(trials: u64, p: f64, rng: &mut R) -> u64 {
    if p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return trials;
    }
    Binomial::new(trials, p).expect("p checked to lie in (0, 1)").sample(rng)
}

/// Decodes a tally into a direction in the receiver's local frame.
pub fn ted_receive(tally: &MeasurementTally) -> Estimate {
    let [px, py, pz] = tally.frequencies();
    let v = Vec3::new(2.0 * px - 1.0, 2.0 * py - 1.0, 2.0 * pz - 1.0);
    let l = v.norm();
    if l == 0.0 {
        return Estimate { direction: Direction::PLUS_Z, degenerate: true };
    }
    Estimate {
        direction: Direction::normalize(v).expect("nonzero length"),
        degenerate: false,
    }
}

/// Accuracy delivered over a depolarizing channel: `(1−ε)δ + 5ε/2`.
pub fn ted_accuracy_bound(delta: f64, epsilon: f64) -> f64 {
    (1.0 - epsilon) * delta + 2.5 * epsilon
}

/// Lower bound on per-link success, `(1 − 2·exp(−2nδ²/25))³`, floored at 0.
pub fn ted_success_bound(n: u64, delta: f64) -> f64 {
    let per_axis = 1.0 - 2.0 * (-2.0 * n as f64 * delta * delta / 25.0).exp();
    per_axis.max(0.0).powi(3)
}

/// Smallest `n` with `ted_success_bound(n, delta) ≥ q_target`.
pub fn required_qubits(delta: f64, q_target: f64) -> u64 {
    assert!(delta > 0.0, "delta must be positive");
    assert!(q_target > 0.0 && q_target < 1.0, "q_target must lie in (0, 1)");
    // 1 - q^(1/3) without cancellation for q close to 1
    let miss = -(q_target.ln() / 3.0).exp_m1();
    let closed = 25.0 / (2.0 * delta * delta) * (2.0 / miss).ln();
    let mut n = closed.ceil().max(1.0) as u64;
    // absorb rounding in the closed form
    while n > 1 && ted_success_bound(n - 1, delta) >= q_target {
        n -= 1;
    }
    while ted_success_bound(n, delta) < q_target {
        n += 1;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance, random_direction, random_frame};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn depolarize_examples() {
        let r = BlochState::new(Vec3::new(0.3, -0.4, 0.5)).unwrap();
        assert_eq!(depolarize(r, 0.0), r);
        assert_eq!(depolarize(r, 1.0).vector(), Vec3::ZERO);
        let z = depolarize(BlochState::pure(Direction::PLUS_Z), 0.1).vector();
        assert!((z.z - 0.9).abs() < 1e-15 && z.x == 0.0 && z.y == 0.0);
    }

    #[test]
    fn outcome_probability_examples() {
        let d = Direction::normalize(Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert!((outcome_probability(BlochState::pure(d), d) - 1.0).abs() < 1e-15);
        assert_eq!(outcome_probability(BlochState::MAXIMALLY_MIXED, d), 0.5);
        let p = outcome_probability(BlochState::pure(Direction::PLUS_X), Direction::PLUS_Y);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn bloch_state_rejects_long_vectors() {
        assert!(matches!(BlochState::new(Vec3::new(1.0, 1.0, 0.0)), Err(LinkError::InvalidBloch(_))));
    }

    #[test]
    fn aligned_state_always_reads_plus_one_on_z() {
        let params = ChannelParams::noiseless(500).unwrap();
        let frame = random_frame(&mut rng(1));
        let msg = QuantumMessage::honest(frame.axis(2), params.n);
        let mut r = rng(2);
        for _ in 0..50 {
            let tally = measure_batch(&msg, &frame, &params, &mut r).unwrap();
            assert_eq!(tally.k[2], params.n);
        }
    }

    #[test]
    fn orthogonal_axis_has_binomial_half_moments() {
        let n = 400u64;
        let params = ChannelParams::noiseless(n).unwrap();
        let frame = random_frame(&mut rng(7));
        let msg = QuantumMessage::honest(frame.axis(2), n);
        let mut r = rng(8);
        let runs = 10_000;
        let xs: Vec<f64> = (0..runs)
            .map(|_| measure_batch(&msg, &frame, &params, &mut r).unwrap().k[0] as f64)
            .collect();
        let mean = xs.iter().sum::<f64>() / runs as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        // n/2 = 200, n/4 = 100
        let se_mean = (100.0f64 / runs as f64).sqrt();
        assert!((mean - 200.0).abs() < 3.0 * se_mean, "mean {mean}");
        // variance of the sample variance ≈ 2σ⁴/(N−1) for near-normal data
        let se_var = (2.0 * 100.0f64.powi(2) / (runs - 1) as f64).sqrt();
        assert!((var - 100.0).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn thirds_partition_is_deterministic() {
        // (+z, 3n/2) then (−z, 3n/2): the z group sees only the second segment
        let n = 10u64;
        let params = ChannelParams::noiseless(n).unwrap();
        let msg = QuantumMessage {
            segments: vec![
                Segment { state: BlochState::pure(Direction::PLUS_Z), count: 15 },
                Segment { state: BlochState::pure(-Direction::PLUS_Z), count: 15 },
            ],
        };
        let mut r = rng(3);
        for _ in 0..100 {
            let tally = measure_batch(&msg, &Frame::IDENTITY, &params, &mut r).unwrap();
            assert_eq!(tally.k[2], 0);
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let params = ChannelParams::noiseless(10).unwrap();
        let msg = QuantumMessage::honest(Direction::PLUS_Z, 9);
        let err = measure_batch(&msg, &Frame::IDENTITY, &params, &mut rng(0)).unwrap_err();
        assert_eq!(err, LinkError::CountMismatch { expected: 30, got: 27 });
        let empty = QuantumMessage {
            segments: vec![
                Segment { state: BlochState::MAXIMALLY_MIXED, count: 30 },
                Segment { state: BlochState::MAXIMALLY_MIXED, count: 0 },
            ],
        };
        assert_eq!(empty.validate(10), Err(LinkError::EmptySegment));
    }

    #[test]
    fn ted_receive_examples() {
        let n = 8;
        let e = ted_receive(&MeasurementTally::new([n, n / 2, n / 2], n).unwrap());
        assert!(!e.degenerate);
        assert!(distance(e.direction, Direction::PLUS_X) < 1e-15);

        let e = ted_receive(&MeasurementTally::new([4, 4, 4], n).unwrap());
        assert!(e.degenerate);
        assert_eq!(e.direction, Direction::PLUS_Z);

        // n = 4, k = (3, 3, 2): x = y = 1/2, z = 0
        let e = ted_receive(&MeasurementTally::new([3, 3, 2], 4).unwrap());
        let h = 1.0 / 2f64.sqrt();
        assert!((e.direction.x() - h).abs() < 1e-15);
        assert!((e.direction.y() - h).abs() < 1e-15);
        assert_eq!(e.direction.z(), 0.0);
    }

    #[test]
    fn tally_rejects_out_of_range_counts() {
        assert!(MeasurementTally::new([5, 0, 0], 4).is_err());
        assert!(MeasurementTally::new([0, 0, 0], 0).is_err());
    }

    #[test]
    fn accuracy_bound_examples() {
        assert_eq!(ted_accuracy_bound(0.05, 0.0), 0.05);
        assert!((ted_accuracy_bound(0.05, 0.1) - 0.295).abs() < 1e-15);
        assert!((ted_accuracy_bound(0.02, 1.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn success_bound_examples() {
        // 2nδ²/25 = 2 at n = 10⁴, δ = 0.05; reference value from an
        // independent high-precision evaluation of (1 − 2e⁻²)³
        let expected = 0.387_945_949_831_803_1;
        assert!((ted_success_bound(10_000, 0.05) - expected).abs() < 1e-12);
        assert_eq!(ted_success_bound(1, 1e-6), 0.0);
        assert!((ted_success_bound(u64::MAX / 4, 0.05) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn required_qubits_worked_example() {
        let delta = 0.02 / 30.0;
        let q = 0.99f64.powf(1.0 / 100.0);
        let n = required_qubits(delta, q);
        assert!((3.05e8..=3.15e8).contains(&(n as f64)), "n = {n}");
        assert!(ted_success_bound(n - 1, delta) < q);
        assert!(ted_success_bound(n, delta) >= q);
    }

    #[test]
    fn required_qubits_agrees_with_bisection() {
        for &(delta, q) in &[(0.05, 0.89), (0.02, 0.5), (0.1, 0.999), (0.3, 0.01)] {
            let n = required_qubits(delta, q);
            // bisection on the monotone bound
            let (mut lo, mut hi) = (1u64, 1u64 << 50);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if ted_success_bound(mid, delta) >= q {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            assert_eq!(n, lo, "delta {delta}, q {q}");
        }
        // independent closed-form evaluation, n = ceil(19803.46) for δ = 0.05, q = 0.89
        assert_eq!(required_qubits(0.05, 0.89), 19_804);
    }

    #[test]
    fn estimate_is_unit_norm() {
        let mut r = rng(21);
        let params = ChannelParams::new(0.3, 50).unwrap();
        for _ in 0..1000 {
            let d = random_direction(&mut r);
            let f = random_frame(&mut r);
            let t = measure_batch(&QuantumMessage::honest(d, 50), &f, &params, &mut r).unwrap();
            let e = ted_receive(&t);
            assert!((e.direction.vec().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_covariance_with_common_random_numbers() {
        let mut r = rng(77);
        let params = ChannelParams::new(0.05, 10_000).unwrap();
        for _ in 0..50 {
            let d = random_direction(&mut r);
            let f = random_frame(&mut r);
            let g = random_frame(&mut r);
            let base = QuantumMessage::honest(d, params.n);
            let rotated = QuantumMessage::honest(g.to_global(d), params.n);
            let t1 = measure_batch(&base, &f, &params, &mut rng(5)).unwrap();
            let t2 = measure_batch(&rotated, &f.rotated_by(&g), &params, &mut rng(5)).unwrap();
            assert_eq!(t1, t2);
        }
    }
}
