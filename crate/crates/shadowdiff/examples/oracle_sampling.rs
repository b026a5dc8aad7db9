//! Drive the full backward sampler with an oracle denoiser (one that knows
//! the true pair) and show that the recovered clean state matches the ground
//! truth to numerical precision for any number of sampler steps, from a
//! single jump to the full schedule.
//!
//! Run with: cargo run --example oracle_sampling

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowdiff::diffusion::{sample, OracleDenoiser, SamplePair};
use shadowdiff::schedule::{ScheduleTable, TimestepSubsequence};
use shadowdiff::Tensor;

fn main() -> shadowdiff::Result<()> {
    let t_max = 100;
    let sched = ScheduleTable::with_defaults(t_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = [4, 8, 8];
    let z_0 = Tensor::<f64>::randn(&mut rng, &shape);
    let z_s = Tensor::<f64>::randn(&mut rng, &shape);
    let pair = SamplePair::new(z_s.clone(), z_0.clone())?;
    let oracle = OracleDenoiser {
        pair: &pair,
        sched: &sched,
    };

    println!("oracle backward sampling, T={t_max}:");
    for n_steps in [1, 2, 5, 10, 50, 100] {
        let steps = TimestepSubsequence::make_strided(t_max, n_steps)?;
        let z_hat = sample(&oracle, &z_s, &sched, &steps, 3, None)?;
        let err = z_hat
            .zip_map(&z_0, |a, b| (a - b).abs())
            .map(|d| (0..d.len()).map(|i| d[i]).fold(0.0, f64::max))?;
        println!("  {n_steps:>3} steps -> |z_hat - z_0|_max = {err:.3e}");
    }
    Ok(())
}
