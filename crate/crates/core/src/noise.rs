//! Counter-based Gaussian noise.
//!
//! Each draw is a pure function of `(seed, stream, counter, index)`: the
//! ChaCha keystream is keyed by the master seed, the stream id selects an
//! independent ChaCha stream, and the counter seeks to a fixed-size block of
//! that stream. Box–Muller consumes exactly two `u64` words per pair of
//! normals, so a block of `n` normals always spans the same words and any
//! iteration can be replayed without storing a noise tape.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids at or above this value are reserved for auxiliary samplers
/// (initial states, exact target draws) so they never collide with replicas.
pub const AUX_STREAM_BASE: u64 = 1 << 62;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for replica `r` of a run.
    pub fn replica(seed: u64, replica: usize) -> Self {
        Self::new(seed, replica as u64)
    }

    /// Auxiliary stream `id`, disjoint from every replica stream.
    pub fn auxiliary(seed: u64, id: u64) -> Self {
        Self::new(seed, AUX_STREAM_BASE + id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fills `out` with the standard normals belonging to `counter`.
    ///
    /// The block for `counter` starts at word `counter * stride(out.len())`,
    /// so the same `(counter, out.len())` always yields the same values.
    pub fn fill_normals(&mut self, counter: u64, out: &mut [f64]) {
        let stride = Self::words_per_block(out.len());
        self.rng.set_word_pos(counter as u128 * stride as u128);
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            pair[0] = z0;
            pair[1] = z1;
        }
        if let [last] = chunks.into_remainder() {
            *last = box_muller(self.rng.next_u64(), self.rng.next_u64()).0;
        }
    }

    /// Uniform draws on `[0, 1)` for `counter`, using the same block layout.
    pub fn fill_uniforms(&mut self, counter: u64, out: &mut [f64]) {
        let stride = Self::words_per_block(out.len());
        self.rng.set_word_pos(counter as u128 * stride as u128);
        for u in out.iter_mut() {
            *u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        }
    }

    /// 32-bit words consumed by a block of `n` normals.
    fn words_per_block(n: usize) -> usize {
        // two u64 per pair, two 32-bit words per u64
        n.div_ceil(2) * 4
    }
}

/// Uniform on `(0, 1]` from the top 53 bits.
fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let u1 = unit_open_closed(a);
    let u2 = unit_open_closed(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_exact() {
        let mut a = NoiseStream::replica(7, 3);
        let mut first = vec![0.0; 9];
        a.fill_normals(41, &mut first);
        let mut scratch = vec![0.0; 9];
        a.fill_normals(5, &mut scratch);
        let mut again = vec![0.0; 9];
        a.fill_normals(41, &mut again);
        assert_eq!(first, again);
        let mut b = NoiseStream::replica(7, 3);
        b.fill_normals(41, &mut again);
        assert_eq!(first, again);
    }

    #[test]
    fn streams_and_counters_differ() {
        let mut a = NoiseStream::replica(7, 0);
        let mut b = NoiseStream::replica(7, 1);
        let (mut x, mut y, mut z) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        a.fill_normals(0, &mut x);
        b.fill_normals(0, &mut y);
        a.fill_normals(1, &mut z);
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn moments_are_standard() {
        let mut s = NoiseStream::new(11, 0);
        let mut buf = vec![0.0; 1001];
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for k in 0..200 {
            s.fill_normals(k, &mut buf);
            for &z in &buf {
                sum += z;
                sq += z * z;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut s = NoiseStream::auxiliary(1, 0);
        let mut buf = vec![0.0; 1000];
        s.fill_uniforms(3, &mut buf);
        assert!(buf.iter().all(|&u| (0.0..1.0).contains(&u)));
    }
}
