//! Wall-clock scaling of the parallel scan. A least-squares fit of
//! log(time) against log(length) gives the growth exponent; linear-time
//! behavior shows up as an exponent near 1, against quadratic attention's
//! 2.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{scan_parallel_kernel, DEFAULT_SCAN_CHUNK};

#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub length: usize,
    pub mean_ms: f64,
    pub exponent: f64,
}

/// Times the parallel scan forward at each length and fits the growth
/// exponent. `lengths` must be strictly increasing with at least two
/// entries.
pub fn bench_scan(
    lengths: &[usize],
    d_model: usize,
    d_state: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "bench needs at least two strictly increasing lengths".into(),
        ));
    }
    if lengths[0] == 0 || d_model == 0 || d_state == 0 || repeats == 0 {
        return Err(Error::Contract("bench dimensions must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut means = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let dn = d_model * d_state;
        let a: Vec<f64> = (0..t * dn).map(|_| rng.random_range(0.1..0.999)).collect();
        let b: Vec<f64> = (0..t * dn).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..t * d_state).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..t * d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let skip: Vec<f64> = (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; t * d_model];

        // One warmup run, then timed repeats.
        scan_parallel_kernel(
            &a, &b, &c, &x, &skip, t, d_model, d_state, DEFAULT_SCAN_CHUNK, &mut y, |_, _| {},
        );
        let start = Instant::now();
        for _ in 0..repeats {
            scan_parallel_kernel(
                &a, &b, &c, &x, &skip, t, d_model, d_state, DEFAULT_SCAN_CHUNK, &mut y, |_, _| {},
            );
        }
        let mean_ms = start.elapsed().as_secs_f64() * 1000.0 / repeats as f64;
        means.push(mean_ms.max(1e-6));
    }

    let exponent = fit_log_log_slope(lengths, &means);
    Ok(lengths
        .iter()
        .zip(&means)
        .map(|(&length, &mean_ms)| BenchRow {
            length,
            mean_ms,
            exponent,
        })
        .collect())
}

fn fit_log_log_slope(lengths: &[usize], times: &[f64]) -> f64 {
    let n = lengths.len() as f64;
    let xs: Vec<f64> = lengths.iter().map(|&l| (l as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|&t| t.ln()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    num / den
}

pub fn rows_to_tsv(rows: &[BenchRow]) -> String {
    let mut out = String::from("length\tmean_ms\texponent\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.4}\t{:.3}\n", r.length, r.mean_ms, r.exponent));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_lists() {
        assert!(bench_scan(&[256], 4, 4, 1).is_err());
        assert!(bench_scan(&[256, 256], 4, 4, 1).is_err());
        assert!(bench_scan(&[512, 256], 4, 4, 1).is_err());
    }

    #[test]
    fn row_count_matches_lengths() {
        let rows = bench_scan(&[64, 128, 256], 8, 4, 2).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mean_ms > 0.0));
        assert!((rows[0].exponent - rows[2].exponent).abs() < 1e-12);
    }

    #[test]
    fn slope_fit_recovers_known_exponent() {
        let lengths = [100usize, 200, 400, 800];
        let times: Vec<f64> = lengths.iter().map(|&l| 0.01 * (l as f64).powf(1.17)).collect();
        let slope = fit_log_log_slope(&lengths, &times);
        assert!((slope - 1.17).abs() < 1e-9);
    }
}
