use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikerpe_core::attention::{gray_pe_map, log_pe_bias, log_pe_map, ssa_dot_map, xnor_map, AttnMap, SpikeTensor};
use spikerpe_core::bitcodec::min_width_for_length;
use spikerpe_core::Result;

const BUDGET: Duration = Duration::from_millis(200);
const ROUNDS: usize = 5;

/// Median over rounds of the mean time per call, each round running for
/// about `BUDGET / ROUNDS`.
fn time_per_call(mut f: impl FnMut() -> Result<AttnMap>) -> Result<f64> {
    let warm = Instant::now();
    let mut reps = 0u32;
    while warm.elapsed() < BUDGET / (ROUNDS as u32 * 4) || reps == 0 {
        std::hint::black_box(f()?);
        reps += 1;
    }
    let per = warm.elapsed().as_secs_f64() / f64::from(reps);
    let iters = ((BUDGET.as_secs_f64() / ROUNDS as f64) / per).ceil().max(1.0) as u32;
    let mut rounds = Vec::with_capacity(ROUNDS);
    for _ in 0..ROUNDS {
        let start = Instant::now();
        for _ in 0..iters {
            std::hint::black_box(f()?);
        }
        rounds.push(start.elapsed().as_secs_f64() / f64::from(iters));
    }
    rounds.sort_by(f64::total_cmp);
    Ok(rounds[ROUNDS / 2])
}

pub fn run(sizes: &[usize], dim: usize, steps: usize) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("scheme,len,dim,steps,micros_per_map");
    for &len in sizes {
        anyhow::ensure!(len >= 2, "lengths must be at least 2");
        let q = SpikeTensor::random(steps, len, dim, 0.25, &mut rng);
        let k = SpikeTensor::random(steps, len, dim, 0.25, &mut rng);
        let bits = min_width_for_length(len);
        let bias = log_pe_bias(len)?;
        let rows: [(&str, f64); 4] = [
            ("dot", time_per_call(|| ssa_dot_map(&q, &k))?),
            ("xnor", time_per_call(|| xnor_map(&q, &k))?),
            ("gray", time_per_call(|| gray_pe_map(&q, &k, bits))?),
            ("log", time_per_call(|| log_pe_map(&q, &k, &bias))?),
        ];
        for (name, secs) in rows {
            println!("{name},{len},{dim},{steps},{:.3}", secs * 1e6);
        }
    }
    Ok(())
}
