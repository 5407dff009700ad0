//! Deterministic random streams and the small dense linear-algebra kernel
//! used by every other module.
//!
//! Randomness is counter-based: every draw is a pure function of a
//! [`StreamKey`], so per-sample work can run on any number of threads
//! without changing results.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

/// Dense vector of 64-bit floats.
pub type DenseVector = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("NonFiniteInput: vector contains a non-finite entry")]
    NonFiniteInput,
    #[error("InvalidStdDev: standard deviation must be >= 0, got {0}")]
    InvalidStdDev(f64),
}

/// Identifies one independent random stream.
///
/// Distinct `(seed, domain, step, index)` tuples yield independent streams;
/// identical tuples yield identical outputs across runs and thread counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: &'static str,
    pub step: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: &'static str, step: u64, index: u64) -> Self {
        Self { seed, domain, step, index }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Raw uniform word stream behind one [`StreamKey`].
///
/// The key is expanded into a ChaCha8 cipher key, so streams with different
/// keys are uncorrelated while the same key always replays the same sequence.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(key: StreamKey) -> Self {
        let mut state = key.seed ^ 0x6A09_E667_F3BC_C908;
        let mut words = [0u64; 4];
        state ^= fnv1a64(key.domain.as_bytes());
        words[0] = splitmix64(&mut state);
        state ^= key.step;
        words[1] = splitmix64(&mut state);
        state ^= key.index;
        words[2] = splitmix64(&mut state);
        words[3] = splitmix64(&mut state);

        let mut seed = [0u8; 32];
        for (chunk, word) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self { rng: ChaCha8Rng::from_seed(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in `(0, 1]`; never returns zero.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// One standard normal draw (Box-Muller; the cosine branch only, so
    /// consecutive draws stay independent without pair caching).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Euclidean norm of `v`.
pub fn l2_norm(v: &[f64]) -> Result<f64, NumericsError> {
    let mut sum = 0.0;
    for &x in v {
        if !x.is_finite() {
            return Err(NumericsError::NonFiniteInput);
        }
        sum += x * x;
    }
    Ok(sum.sqrt())
}

/// `count` iid draws from N(0, stddev^2); `stddev = 0` returns zeros.
pub fn gaussian(key: StreamKey, count: usize, stddev: f64) -> Result<DenseVector, NumericsError> {
    if !(stddev >= 0.0) {
        return Err(NumericsError::InvalidStdDev(stddev));
    }
    if stddev == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let mut stream = Stream::new(key);
    Ok((0..count).map(|_| stddev * stream.next_gaussian()).collect())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn matvec(&self, x: &[f64]) -> DenseVector {
        assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        matvec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }
}

/// `out = W x` for a row-major `rows x cols` weight slice.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// `out = W^T d` for a row-major `rows x cols` weight slice.
pub fn matvec_transpose(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for (r, dr) in d.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wi) in out.iter_mut().zip(row) {
            *o += wi * dr;
        }
    }
}

/// Rank-1 accumulate: `acc += d x^T`, row-major `rows x cols`.
pub fn outer_accumulate(acc: &mut [f64], d: &[f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), d.len() * x.len());
    for (r, dr) in d.iter().enumerate() {
        let row = &mut acc[r * x.len()..(r + 1) * x.len()];
        for (a, xi) in row.iter_mut().zip(x) {
            *a += dr * xi;
        }
    }
}

/// `a += b` elementwise.
pub fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `a += s * b` elementwise.
pub fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}
