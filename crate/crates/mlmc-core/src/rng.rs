//! Keyed, splittable random streams.
//!
//! Every consumer of randomness in this crate names the stream it wants with
//! a [`StreamKey`] and derives a [`Stream`] from it. Streams with equal keys
//! are identical; streams with different keys are statistically independent.
//! Because a stream is a pure function of its key, estimators can hand
//! arbitrary sub-ranges of replicates to worker threads and still produce
//! bit-identical results in any execution order.
//!
//! The generator is SplitMix64 with a per-stream increment ("gamma") derived
//! from the key, so distinct keys walk genuinely different sequences rather
//! than different offsets of a shared one.

/// What a stream is used for. Separates e.g. pilot sampling from estimation
/// sampling so enlarging one phase never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Final estimation samples.
    Estimation,
    /// Pilot/bracketing samples that steer an estimator.
    Pilot,
    /// Samples consumed by a drift-shift optimizer.
    Optimizer,
    /// Inner (conditional) samples of a nested estimator.
    Inner,
    /// Outer scenario samples of a nested estimator.
    Outer,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Estimation => 0x45535449,
            Purpose::Pilot => 0x50494c4f,
            Purpose::Optimizer => 0x4f505449,
            Purpose::Inner => 0x494e4e45,
            Purpose::Outer => 0x4f555445,
        }
    }
}

/// Address of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub level: u32,
    pub replicate: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, level: u32, replicate: u64) -> Self {
        StreamKey { seed, purpose, level, replicate }
    }

    /// Derives the stream this key addresses.
    pub fn stream(&self) -> Stream {
        // Fold the key fields through the finalizer one at a time. Each fold
        // avalanches, so nearby keys (adjacent replicates, levels) land far
        // apart in state space.
        let mut h = mix64(self.seed ^ 0x9e3779b97f4a7c15);
        h = mix64(h ^ self.purpose.tag());
        h = mix64(h ^ (self.level as u64).wrapping_mul(0xbf58476d1ce4e5b9));
        h = mix64(h ^ self.replicate.wrapping_mul(0x94d049bb133111eb));
        let gamma = mix_gamma(mix64(h ^ 0x6a09e667f3bcc909));
        Stream { state: h, gamma }
    }
}

/// David Stafford's mix13 finalizer (the SplitMix64 output function).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Turns an arbitrary word into a usable SplitMix64 increment: odd, and with
/// enough bit transitions that the sequence mixes well.
#[inline]
fn mix_gamma(z: u64) -> u64 {
    let mut g = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    g = (g ^ (g >> 33)).wrapping_mul(0xc4ceb9fe1a85ec53);
    g = (g ^ (g >> 33)) | 1;
    if (g ^ (g >> 1)).count_ones() < 24 {
        g ^ 0xaaaaaaaaaaaaaaaa
    } else {
        g
    }
}

/// A deterministic pseudo-random stream. Cheap to create, cheap to advance.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
    gamma: u64,
}

impl Stream {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(self.gamma);
        mix64(self.state)
    }

    /// Uniform draw on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw by inverse-CDF, so a stream's k-th normal depends
    /// only on its k-th uniform (no rejection, no cached spare).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        crate::math::norm_quantile(self.uniform())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn key(seed: u64, purpose: Purpose, level: u32, replicate: u64) -> StreamKey {
        StreamKey::new(seed, purpose, level, replicate)
    }

    #[test]
    fn equal_keys_give_identical_streams() {
        let mut a = key(7, Purpose::Estimation, 3, 12345).stream();
        let mut b = key(7, Purpose::Estimation, 3, 12345).stream();
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn any_field_change_gives_a_different_stream() {
        let base = key(7, Purpose::Estimation, 3, 12345);
        let variants = [
            key(8, Purpose::Estimation, 3, 12345),
            key(7, Purpose::Pilot, 3, 12345),
            key(7, Purpose::Estimation, 4, 12345),
            key(7, Purpose::Estimation, 3, 12346),
        ];
        let first: Vec<u64> = {
            let mut s = base.stream();
            (0..64).map(|_| s.next_u64()).collect()
        };
        for v in variants {
            let mut s = v.stream();
            let other: Vec<u64> = (0..64).map(|_| s.next_u64()).collect();
            assert_ne!(first, other);
        }
    }

    #[test]
    fn adjacent_replicates_are_uncorrelated_in_the_mean() {
        // crude independence check: averaged products of paired uniforms
        // should sit near E[U]^2 = 0.25
        let n = 100_000;
        let mut acc = 0.0;
        for r in 0..n {
            let mut a = key(1, Purpose::Estimation, 1, r).stream();
            let mut b = key(1, Purpose::Estimation, 1, r + 1).stream();
            acc += a.uniform() * b.uniform();
        }
        let mean = acc / n as f64;
        assert!((mean - 0.25).abs() < 0.003, "paired mean {mean}");
    }

    #[test]
    fn uniform_is_strictly_inside_unit_interval() {
        let mut s = key(3, Purpose::Inner, 0, 0).stream();
        for _ in 0..100_000 {
            let u = s.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut s = key(11, Purpose::Outer, 0, 0).stream();
        let n = 1_000_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let z = s.normal();
            m1 += z;
            m2 += z * z;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 0.004, "mean {m1}");
        assert!((m2 - 1.0).abs() < 0.006, "second moment {m2}");
    }
}
