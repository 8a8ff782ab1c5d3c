//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in input order, and numeric reductions are done
//! sequentially over those ordered partial results, so the parallel and
//! sequential paths produce bit-identical output. Without the `parallel`
//! feature, [`Exec::Parallel`] runs sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Seeded random source used everywhere reproducibility matters.
pub type SeedRng = ChaCha8Rng;

/// Builds an independent random stream from a base seed and a stream id.
pub fn stream_rng(seed: u64, stream: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs up to three small indices into one stream id.
pub fn stream_id(tag: u8, a: u64, b: u64) -> u64 {
    ((tag as u64) << 56) ^ ((a & 0x00ff_ffff) << 32) ^ (b & 0xffff_ffff)
}

/// Execution strategy for data-parallel loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => (0..n).map(f).collect(),
        }
    }

    /// Splits `0..n` into fixed-size chunks, lets `f` accumulate each chunk into
    /// its own zeroed buffer of length `width`, and sums the buffers in chunk
    /// order. Chunk boundaries do not depend on the thread count.
    pub fn chunked_sum<F>(self, n: usize, chunk: usize, width: usize, f: F) -> Vec<f64>
    where
        F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n_chunks = n.div_ceil(chunk);
        let parts = self.map_range(n_chunks, |c| {
            let mut buf = vec![0.0; width];
            f(c * chunk..((c + 1) * chunk).min(n), &mut buf);
            buf
        });
        let mut total = vec![0.0; width];
        for part in &parts {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }
}

/// Sizes the global worker pool. Must run before the first parallel call;
/// later calls fail. A no-op without the `parallel` feature.
pub fn configure_threads(threads: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chunked_sum_matches_across_strategies() {
        let values: Vec<f64> = (0..1000)
            .map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0))
            .collect();
        let run = |exec: Exec| {
            exec.chunked_sum(values.len(), 17, 3, |range, buf| {
                for i in range {
                    buf[i % 3] += values[i];
                }
            })
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream_rng(7, 1).gen();
        let b: u64 = stream_rng(7, 2).gen();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(7, 1).gen::<u64>());
    }
}
