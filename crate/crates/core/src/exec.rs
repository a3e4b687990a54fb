//! Replicate execution and random-stream derivation.
//!
//! Every replicate (or particle, or tagged site) owns a random stream derived
//! from the master seed and its index alone, so results never depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream used throughout the simulators.
pub type SimRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Stafford variant 13).
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix64(master ^ GOLDEN_GAMMA * (index + 1))`.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1)))
}

pub fn stream(master: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(stream_seed(master, index))
}

/// How independent work items are scheduled.
///
/// `Parallel` runs on the rayon global pool (or the pool installed by the
/// caller). Without the `parallel` feature it silently degrades to
/// `Sequential`; outputs are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Applies `f` to every element of `items` in place.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}

/// Fixed observation grid `t₀ + kΔ` up to an end time.
#[derive(Debug, Clone)]
pub(crate) struct SnapshotClock {
    t0: f64,
    dt: Option<f64>,
    end: f64,
    next: usize,
}

impl SnapshotClock {
    pub(crate) fn new(t0: f64, dt: Option<f64>, end: f64) -> SnapshotClock {
        SnapshotClock { t0, dt, end, next: 0 }
    }

    /// Calls `f` for every grid time before `until` (or at it, when
    /// `inclusive`) that has not been reported yet.
    pub(crate) fn drain(&mut self, until: f64, inclusive: bool, mut f: impl FnMut(f64)) {
        let Some(dt) = self.dt else { return };
        loop {
            let s = self.t0 + self.next as f64 * dt;
            // tolerate rounding in the last grid point
            let slack = 1e-9 * dt;
            let due = if inclusive { s <= until + slack } else { s < until };
            if !due || s > self.end + slack {
                break;
            }
            f(s.min(self.end));
            self.next += 1;
        }
    }
}

/// Runs `n` fallible replicates, each with its own stream derived from
/// `(master, index)`. Returns the first error in index order.
pub fn run_replicates<T, F>(exec: Execution, n: usize, master: u64, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut SimRng) -> crate::Result<T> + Sync + Send,
{
    exec.map_indexed(n, |i| f(i, &mut stream(master, i as u64)))
        .into_iter()
        .collect()
}

/// Runs `body` on a dedicated pool with `threads` workers, or directly when
/// the `parallel` feature is off.
pub fn with_threads<T: Send>(threads: Option<usize>, body: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(body);
        }
    }
    let _ = threads;
    body()
}
