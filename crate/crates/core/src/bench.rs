//! Counterfactual synthesis throughput measurement.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{CfError, Result};
use crate::tde::Synthesizer;
use crate::types::CalibrationConfig;
use crate::vector::{l2_normalize, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchParams {
    pub dim: usize,
    pub n_images: usize,
    pub m_contexts: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            dim: 512,
            n_images: 1000,
            m_contexts: 100,
            classes: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub params: BenchParams,
    /// Synthesized counterfactuals, `n_images · m_contexts`.
    pub ops: u64,
    pub wall_seconds: f64,
    pub ns_per_op: f64,
    pub checksum: f64,
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Result<Matrix> {
    let data: Vec<Vec<f32>> = (0..rows)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            l2_normalize(&v)
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&data)
}

/// Synthesizes and scores `n_images · m_contexts` counterfactuals against
/// every class. Inputs are drawn before the clock starts.
pub fn run_bench(params: BenchParams) -> Result<BenchReport> {
    let BenchParams {
        dim,
        n_images,
        m_contexts,
        classes,
        seed,
    } = params;
    for (field, v) in [("dim", dim), ("n_images", n_images), ("m_contexts", m_contexts), ("classes", classes)] {
        if v == 0 {
            return Err(CfError::config(field, "must be positive"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = random_unit_rows(&mut rng, n_images, dim)?;
    let contexts = random_unit_rows(&mut rng, m_contexts, dim)?;
    let texts = random_unit_rows(&mut rng, classes, dim)?;
    let config = CalibrationConfig::default();

    let mut synth = Synthesizer::default();
    let mut checksum = 0.0f64;
    let start = Instant::now();
    for c_x in objects.iter_rows() {
        for z in contexts.iter_rows() {
            for t in texts.iter_rows() {
                checksum += synth.tde(c_x, z, t, &config)?;
            }
        }
    }
    let wall = start.elapsed();
    let ops = (n_images * m_contexts) as u64;
    Ok(BenchReport {
        params,
        ops,
        wall_seconds: wall.as_secs_f64(),
        ns_per_op: wall.as_nanos() as f64 / ops as f64,
        checksum: std::hint::black_box(checksum),
    })
}

impl BenchReport {
    pub fn wall(&self) -> Duration {
        Duration::from_secs_f64(self.wall_seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_is_stable() {
        let p = BenchParams {
            dim: 16,
            n_images: 1,
            m_contexts: 3,
            classes: 2,
            seed: 7,
        };
        let a = run_bench(p).unwrap();
        let b = run_bench(p).unwrap();
        assert_eq!(a.ops, 3);
        assert!(a.ns_per_op.is_finite());
        assert_eq!(a.checksum, b.checksum);
        assert!(run_bench(BenchParams { classes: 0, ..p }).unwrap_err().is_config_error());
    }
}
