use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{attend, AttentionKind, AttentionParams, ExecStrategy};
use crate::error::{invalid, Result};
use crate::rng::{random_normal, Rng};

/// Operand shape used by the latency harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            batch: 1,
            heads: 4,
            head_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub kind: AttentionKind,
    pub strategy: String,
    pub length: usize,
    pub reps: usize,
    pub median_ns: u64,
    pub min_ns: u64,
}

/// Times one attention call per rep after a single warm-up call.
///
/// Rows come back in ascending length. The median of an even number of reps
/// is the mean of the two middle samples, rounded down.
pub fn bench_attention(
    kind: AttentionKind,
    strategy: ExecStrategy,
    shape: BenchShape,
    lengths: &[usize],
    reps: usize,
    rng: &mut Rng,
) -> Result<Vec<LatencyRow>> {
    if reps < 3 {
        return Err(invalid(format!("need at least 3 reps, got {reps}")));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(invalid("lengths must be nonempty and positive"));
    }
    let channels = shape.heads * shape.head_dim;
    let params = AttentionParams::random(channels, shape.heads, rng)?;
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mut rows = Vec::with_capacity(sorted.len());
    for &len in &sorted {
        let x = random_normal(rng, &[shape.batch, len, channels])?;
        std::hint::black_box(attend(kind, &x, None, &params, strategy)?);
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            let out = attend(kind, &x, None, &params, strategy)?;
            samples.push(start.elapsed().as_nanos() as u64);
            std::hint::black_box(out);
        }
        rows.push(summarize(kind, strategy, len, samples));
    }
    Ok(rows)
}

fn summarize(kind: AttentionKind, strategy: ExecStrategy, length: usize, mut samples: Vec<u64>) -> LatencyRow {
    samples.sort_unstable();
    let reps = samples.len();
    let median = if reps % 2 == 1 {
        samples[reps / 2]
    } else {
        (samples[reps / 2 - 1] + samples[reps / 2]) / 2
    };
    LatencyRow {
        kind,
        strategy: strategy.label(),
        length,
        reps,
        median_ns: median,
        min_ns: samples[0],
    }
}

/// Times several strategies on one shared input, one call of each strategy
/// per round so slow drift in machine speed hits all of them alike.
///
/// Rows follow the order of `strategies`.
pub fn bench_ablation(
    kind: AttentionKind,
    strategies: &[ExecStrategy],
    shape: BenchShape,
    length: usize,
    reps: usize,
    rng: &mut Rng,
) -> Result<Vec<LatencyRow>> {
    if reps < 3 {
        return Err(invalid(format!("need at least 3 reps, got {reps}")));
    }
    if strategies.is_empty() || length == 0 {
        return Err(invalid("need at least one strategy and a positive length"));
    }
    let channels = shape.heads * shape.head_dim;
    let params = AttentionParams::random(channels, shape.heads, rng)?;
    let x = random_normal(rng, &[shape.batch, length, channels])?;
    for &st in strategies {
        std::hint::black_box(attend(kind, &x, None, &params, st)?);
    }
    let mut samples = vec![Vec::with_capacity(reps); strategies.len()];
    for _ in 0..reps {
        for (slot, &st) in samples.iter_mut().zip(strategies) {
            let start = Instant::now();
            let out = attend(kind, &x, None, &params, st)?;
            slot.push(start.elapsed().as_nanos() as u64);
            std::hint::black_box(out);
        }
    }
    Ok(strategies
        .iter()
        .zip(samples)
        .map(|(&st, s)| summarize(kind, st, length, s))
        .collect())
}

/// Least-squares slope of `ln(median)` against `ln(length)`.
pub fn log_log_slope(rows: &[LatencyRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.length as f64).ln(), (r.median_ns.max(1) as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_schema_ascending() {
        let shape = BenchShape {
            batch: 1,
            heads: 2,
            head_dim: 8,
        };
        let rows = bench_attention(
            AttentionKind::Linear,
            ExecStrategy::ALL,
            shape,
            &[64, 32],
            3,
            &mut Rng::new(1),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].length, 32);
        assert_eq!(rows[1].length, 64);
        assert!(rows.iter().all(|r| r.min_ns <= r.median_ns && r.reps == 3));
        assert_eq!(rows[0].strategy, "all");
    }

    #[test]
    fn ablation_rows_follow_strategy_order() {
        let shape = BenchShape {
            batch: 1,
            heads: 2,
            head_dim: 8,
        };
        let sts = [ExecStrategy::ALL, ExecStrategy::BASELINE];
        let rows =
            bench_ablation(AttentionKind::Softmax, &sts, shape, 40, 3, &mut Rng::new(2)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].strategy.as_str(), rows[1].strategy.as_str()), ("all", "baseline"));
        assert!(rows.iter().all(|r| r.length == 40 && r.reps == 3));
    }

    #[test]
    fn too_few_reps() {
        for reps in [0, 2] {
            assert!(bench_attention(
                AttentionKind::Softmax,
                ExecStrategy::BASELINE,
                BenchShape::default(),
                &[16],
                reps,
                &mut Rng::new(1),
            )
            .is_err());
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let rows: Vec<LatencyRow> = [100usize, 200, 400, 800]
            .iter()
            .map(|&l| LatencyRow {
                kind: AttentionKind::Softmax,
                strategy: "baseline".into(),
                length: l,
                reps: 3,
                median_ns: (l * l) as u64,
                min_ns: 0,
            })
            .collect();
        assert!((log_log_slope(&rows) - 2.0).abs() < 1e-9);
    }
}
