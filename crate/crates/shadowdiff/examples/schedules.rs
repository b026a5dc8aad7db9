//! Print the noise and residual schedules for a small diffusion horizon and
//! show how strided timestep subsequences are laid out.
//!
//! Run with: cargo run --example schedules

use shadowdiff::schedule::{ScheduleTable, TimestepSubsequence};

fn main() -> shadowdiff::Result<()> {
    let t_max = 20;
    let sched = ScheduleTable::with_defaults(t_max)?;
    let (bmin, bmax) = sched.beta_range();
    println!("linear beta schedule: T={t_max}, beta in [{bmin}, {bmax}]");
    println!("{:>4} {:>12} {:>12} {:>12}", "t", "alpha_bar", "beta_bar", "sqrt(1-ab)");
    for t in 1..=t_max {
        println!(
            "{t:>4} {:>12.6} {:>12.6} {:>12.6}",
            sched.alpha_bar(t),
            sched.beta_bar(t),
            sched.sqrt_one_minus_alpha_bar(t)
        );
    }
    println!();
    println!("residual injection is complete at T: beta_bar(T) = {}", sched.beta_bar(t_max));
    println!();
    for n in [1, 2, 4, 5, 10, 20] {
        let sub = TimestepSubsequence::make_strided(t_max, n)?;
        println!("{n:>2} strided steps: {:?}", sub.steps());
    }
    Ok(())
}
