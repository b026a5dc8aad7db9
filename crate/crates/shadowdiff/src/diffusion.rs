//! Residual-generation forward process, epsilon composition, noise-residual
//! decomposition (NRD), the deterministic backward sampler, and the plain
//! DDIM baseline used by the ablation harness.

use crate::error::{Error, Result};
use crate::schedule::{ScheduleTable, TimestepSubsequence};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A latent together with its diffusion timestep.
#[derive(Debug, Clone)]
pub struct LatentState<S: Scalar = f32> {
    pub z: Tensor<S>,
    pub t: usize,
}

/// One training sample in latent space: shadow latent, shadow-free latent,
/// and their residual `r = z_s - z_0`.
#[derive(Debug, Clone)]
pub struct SamplePair<S: Scalar = f32> {
    pub z_s: Tensor<S>,
    pub z_0: Tensor<S>,
    pub r: Tensor<S>,
}

impl<S: Scalar> SamplePair<S> {
    pub fn new(z_s: Tensor<S>, z_0: Tensor<S>) -> Result<Self> {
        let r = z_s.sub(&z_0)?;
        Ok(Self { z_s, z_0, r })
    }
}

/// Result of decomposing the network output into signal, residual, and noise.
#[derive(Debug, Clone)]
pub struct NrdOutput<S: Scalar = f32> {
    /// Estimated clean (shadow-free) latent.
    pub z0_hat: Tensor<S>,
    /// Estimated shadow residual, `z_s - z0_hat` by construction.
    pub r_hat: Tensor<S>,
    /// Pure-noise part of the network estimate.
    pub eps_noise: Tensor<S>,
    /// The composite prediction as emitted by the network.
    pub eps_net: Tensor<S>,
}

/// `z'_t = z_0 + beta_bar_t * r`: interpolation between the shadow-free and
/// shadow latents.
pub fn forward_interpolate<S: Scalar>(
    z_0: &Tensor<S>,
    r: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let bb = S::of_f64(sched.beta_bar(t));
    z_0.zip_map(r, |z, rv| z + bb * rv)
}

/// `z_t = sqrt(alpha_bar_t) * z'_t + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise<S: Scalar>(
    z_prime: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let sa = S::of_f64(sched.sqrt_alpha_bar(t));
    let so = S::of_f64(sched.sqrt_one_minus_alpha_bar(t));
    z_prime.zip_map(eps, |z, e| sa * z + so * e)
}

/// The composite the network is implicitly trained toward:
/// `eps + beta_bar_t * sqrt(alpha_bar_t) * r / sqrt(1 - alpha_bar_t)`.
pub fn compose_epsilon<S: Scalar>(
    eps: &Tensor<S>,
    r: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let denom = sched.sqrt_one_minus_alpha_bar(t);
    if denom == 0.0 {
        return Err(Error::DegenerateSchedule {
            t,
            msg: "1 - alpha_bar underflowed to 0".into(),
        });
    }
    let k = S::of_f64(sched.beta_bar(t) * sched.sqrt_alpha_bar(t) / denom);
    eps.zip_map(r, |e, rv| e + k * rv)
}

/// `z0_hat = (z_t - sqrt(1 - alpha_bar_t) * eps_net) / sqrt(alpha_bar_t)`.
pub fn predict_z0<S: Scalar>(
    z_t: &Tensor<S>,
    eps_net: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let sa = sched.sqrt_alpha_bar(t);
    if sa <= 0.0 {
        return Err(Error::DegenerateSchedule {
            t,
            msg: "alpha_bar <= 0".into(),
        });
    }
    let so = S::of_f64(sched.sqrt_one_minus_alpha_bar(t));
    let inv = S::of_f64(1.0 / sa);
    z_t.zip_map(eps_net, |z, e| (z - so * e) * inv)
}

/// Split the network estimate into clean latent, residual, and pure noise.
pub fn nrd_decompose<S: Scalar>(
    z_s: &Tensor<S>,
    z_t: &Tensor<S>,
    eps_net: &Tensor<S>,
    t: usize,
    sched: &ScheduleTable,
) -> Result<NrdOutput<S>> {
    let z0_hat = predict_z0(z_t, eps_net, t, sched)?;
    let r_hat = z_s.sub(&z0_hat)?;
    let denom = sched.sqrt_one_minus_alpha_bar(t);
    if denom == 0.0 {
        return Err(Error::DegenerateSchedule {
            t,
            msg: "1 - alpha_bar underflowed to 0".into(),
        });
    }
    let k = S::of_f64(sched.beta_bar(t) * sched.sqrt_alpha_bar(t) / denom);
    let eps_noise = eps_net.zip_map(&r_hat, |e, rv| e - k * rv)?;
    Ok(NrdOutput {
        z0_hat,
        r_hat,
        eps_noise,
        eps_net: eps_net.clone(),
    })
}

/// One deterministic backward step: re-anchor on the shadow latent with the
/// estimated residual, then re-noise to `t_prev`.
pub fn sampler_step<S: Scalar>(
    z_s: &Tensor<S>,
    nrd: &NrdOutput<S>,
    t: usize,
    t_prev: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "t_prev={t_prev} must be < t={t}"
        )));
    }
    let bb_prev = S::of_f64(sched.beta_bar(t_prev) - 1.0);
    let z_prime = z_s.zip_map(&nrd.r_hat, |z, rv| z + bb_prev * rv)?;
    forward_noise(&z_prime, &nrd.eps_noise, t_prev, sched)
}

/// Standard deterministic DDIM update (predict the clean signal, re-noise).
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_net: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &ScheduleTable,
) -> Result<Tensor<S>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "t_prev={t_prev} must be < t={t}"
        )));
    }
    let z0_hat = predict_z0(z_t, eps_net, t, sched)?;
    forward_noise(&z0_hat, eps_net, t_prev, sched)
}

/// Mean squared error between the estimated and true clean latents (Eq. 7
/// style target); also used for the DDIM-baseline noise loss.
pub fn training_target_loss<S: Scalar>(z0_hat: &Tensor<S>, z_0: &Tensor<S>) -> Result<f64> {
    if z0_hat.shape() != z_0.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z0_hat.shape(),
            z_0.shape()
        )));
    }
    Ok(z0_hat.mean_sq_diff(z_0))
}

/// Anything that predicts the composite epsilon from `(z_t, t, z_s[, mask])`.
pub trait Denoiser<S: Scalar> {
    fn predict(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        z_s: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>>;
}

/// A denoiser that knows the true pair and returns the exact composite of
/// the implied noise and the true residual. Test instrument: drives the
/// sampler along the exact backward trajectory.
pub struct OracleDenoiser<'a, S: Scalar> {
    pub pair: &'a SamplePair<S>,
    pub sched: &'a ScheduleTable,
}

impl<S: Scalar> Denoiser<S> for OracleDenoiser<'_, S> {
    fn predict(
        &self,
        z_t: &Tensor<S>,
        t: usize,
        _z_s: &Tensor<S>,
        _mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        // eps implied by the forward relation at (z_t, t) with the true pair.
        let z_prime = forward_interpolate(&self.pair.z_0, &self.pair.r, t, self.sched)?;
        let so = self.sched.sqrt_one_minus_alpha_bar(t);
        if so == 0.0 {
            return Err(Error::DegenerateSchedule {
                t,
                msg: "cannot imply noise at alpha_bar = 1".into(),
            });
        }
        let sa = S::of_f64(self.sched.sqrt_alpha_bar(t));
        let inv = S::of_f64(1.0 / so);
        let eps = z_t.zip_map(&z_prime, |z, zp| (z - sa * zp) * inv)?;
        compose_epsilon(&eps, &self.pair.r, t, self.sched)
    }
}

/// Full backward sampling: noise the shadow latent to `t_max`, walk the
/// reversed subsequence with `sampler_step`, and finish with
/// `z_sf = z_s - r_hat` at the smallest timestep. Deterministic given
/// (denoiser weights, z_s, seed, steps). Equivalent to
/// `sample_clamped` with the clamp disabled.
pub fn sample<S: Scalar>(
    denoiser: &dyn Denoiser<S>,
    z_s: &Tensor<S>,
    sched: &ScheduleTable,
    steps: &TimestepSubsequence,
    seed: u64,
    mask: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    sample_clamped(denoiser, z_s, sched, steps, seed, mask, f64::INFINITY)
}

/// `sample` with a bounded-residual stabilizer. At large timesteps the
/// decomposition divides by `sqrt(alpha_bar)`, which is tiny near `t_max`,
/// so small errors in the network output blow up in the residual estimate
/// and corrupt the re-anchored state for every later step. Clamping the
/// intermediate residual elementwise to `[-r_clamp, r_clamp]` bounds that
/// state corruption; the clamp is expressed in the units of `z_s`
/// (unit-variance for normalized latents). The final residual, emitted at
/// the smallest timestep where the division is well conditioned, is left
/// unclamped, so an exact predictor still recovers the clean signal exactly
/// regardless of the bound.
pub fn sample_clamped<S: Scalar>(
    denoiser: &dyn Denoiser<S>,
    z_s: &Tensor<S>,
    sched: &ScheduleTable,
    steps: &TimestepSubsequence,
    seed: u64,
    mask: Option<&Tensor<S>>,
    r_clamp: f64,
) -> Result<Tensor<S>> {
    if !(r_clamp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "r_clamp={r_clamp} must be positive"
        )));
    }
    let t_max = sched.t_max();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::<S>::randn(&mut rng, z_s.shape());
    // beta_bar[t_max] = 1 makes z'_{t_max} = z_s, so noising z_s directly is
    // the exact forward endpoint.
    let mut z_t = forward_noise(z_s, &eps, t_max, sched)?;
    let taus = steps.steps();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let eps_net = denoiser.predict(&z_t, t, z_s, mask)?;
        let mut nrd = nrd_decompose(z_s, &z_t, &eps_net, t, sched)?;
        if i == 0 {
            return z_s.sub(&nrd.r_hat);
        }
        if r_clamp.is_finite() {
            let lo = S::of_f64(-r_clamp);
            let hi = S::of_f64(r_clamp);
            nrd.r_hat = nrd.r_hat.map(|v| v.max(lo).min(hi));
        }
        z_t = sampler_step(z_s, &nrd, t, taus[i - 1], sched)?;
    }
    unreachable!("subsequence is non-empty")
}

/// DDIM-baseline sampling for the ablation harness: same schedule, plain
/// DDIM updates, clean prediction emitted at the smallest timestep. The
/// trajectory starts from the noised shadow latent so the baseline sees the
/// same initialization as the residual sampler.
pub fn sample_ddim<S: Scalar>(
    denoiser: &dyn Denoiser<S>,
    z_s: &Tensor<S>,
    sched: &ScheduleTable,
    steps: &TimestepSubsequence,
    seed: u64,
    mask: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let t_max = sched.t_max();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::<S>::randn(&mut rng, z_s.shape());
    let mut z_t = forward_noise(z_s, &eps, t_max, sched)?;
    let taus = steps.steps();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let eps_net = denoiser.predict(&z_t, t, z_s, mask)?;
        if i == 0 {
            return predict_z0(&z_t, &eps_net, t, sched);
        }
        z_t = ddim_step(&z_t, &eps_net, t, taus[i - 1], sched)?;
    }
    unreachable!("subsequence is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-step table with alpha_bar(1)=0.64 and alpha_bar(2)=0.25, chosen
    /// so every factor below is an exact decimal.
    fn toy_table() -> (ScheduleTable, usize, usize) {
        // rate_1 = 0.36; rate_2 = 1 - 0.25/0.64 = 0.609375.
        let s = ScheduleTable::build(2, 0.36, 0.609375).unwrap();
        assert!((s.alpha_bar(1) - 0.64).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-12);
        assert_eq!(s.beta_bar(1), 0.5);
        assert_eq!(s.beta_bar(2), 1.0);
        (s, 2, 1)
    }

    fn t1<S: Scalar>(v: f64) -> Tensor<S> {
        Tensor::scalar(S::of_f64(v))
    }

    #[test]
    fn forward_interpolate_scalar() {
        let (s, _, t) = toy_table();
        // beta_bar(1) = 0.5
        let out = forward_interpolate(&t1::<f64>(1.0), &t1(2.0), t, &s).unwrap();
        assert_eq!(out.item(), 2.0);
    }

    #[test]
    fn forward_interpolate_zero_residual_and_endpoint() {
        let s = ScheduleTable::with_defaults(10).unwrap();
        let z0 = t1::<f64>(1.3);
        let r0 = t1::<f64>(0.0);
        for t in 0..=10 {
            assert_eq!(forward_interpolate(&z0, &r0, t, &s).unwrap().item(), 1.3);
        }
        // at t = t_max, z' = z_s
        let r = t1::<f64>(0.7);
        let zs = z0.add(&r).unwrap();
        assert_eq!(
            forward_interpolate(&z0, &r, 10, &s).unwrap().item(),
            zs.item()
        );
    }

    #[test]
    fn forward_noise_scalar() {
        let (s, t, _) = toy_table(); // alpha_bar(t=2) = 0.25
        let out = forward_noise(&t1::<f64>(2.0), &t1(0.0), t, &s).unwrap();
        assert!((out.item() - 1.0).abs() < 1e-12);
        let out = forward_noise(&t1::<f64>(0.0), &t1(1.0), t, &s).unwrap();
        assert!((out.item() - 0.75f64.sqrt()).abs() < 1e-12);
        // identity at t = 0
        let out = forward_noise(&t1::<f64>(2.0), &t1(5.0), 0, &s).unwrap();
        assert_eq!(out.item(), 2.0);
    }

    #[test]
    fn compose_epsilon_scalar() {
        // two-step table where t=1 has alpha_bar=0.25 and beta_bar=0.5
        let s = ScheduleTable::build(2, 0.75, 0.75).unwrap();
        assert_eq!(s.alpha_bar(1), 0.25);
        assert_eq!(s.beta_bar(1), 0.5);
        let out = compose_epsilon(&t1::<f64>(0.1), &t1(2.0), 1, &s).unwrap();
        let expect = 0.1 + 0.5 * 0.5 * 2.0 / 0.75f64.sqrt();
        assert!((out.item() - expect).abs() < 1e-12);
        assert!((out.item() - 0.677350).abs() < 1e-6);
        // zero residual reduces to pure noise
        let out = compose_epsilon(&t1::<f64>(0.1), &t1(0.0), 1, &s).unwrap();
        assert_eq!(out.item(), 0.1);
    }

    #[test]
    fn predict_z0_scalar() {
        // continuation of the eps=0, z_0=1, r=2 scenario at alpha_bar=0.25,
        // beta_bar=0.5: z_t = 1.0, eps_net = 0.577350...
        let s = ScheduleTable::build(2, 0.75, 0.75).unwrap();
        let z0 = t1::<f64>(1.0);
        let r = t1::<f64>(2.0);
        let eps = t1::<f64>(0.0);
        let zp = forward_interpolate(&z0, &r, 1, &s).unwrap();
        let zt = forward_noise(&zp, &eps, 1, &s).unwrap();
        assert!((zt.item() - 1.0).abs() < 1e-12);
        let eps_net = compose_epsilon(&eps, &r, 1, &s).unwrap();
        assert!((eps_net.item() - 0.5773502691896258).abs() < 1e-12);
        let z0_hat = predict_z0(&zt, &eps_net, 1, &s).unwrap();
        assert!((z0_hat.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nrd_scalar_scenario() {
        let s = ScheduleTable::build(2, 0.75, 0.75).unwrap();
        let pair = SamplePair::new(t1::<f64>(3.0), t1(1.0)).unwrap();
        let eps = t1::<f64>(0.0);
        let zp = forward_interpolate(&pair.z_0, &pair.r, 1, &s).unwrap();
        let zt = forward_noise(&zp, &eps, 1, &s).unwrap();
        let eps_net = compose_epsilon(&eps, &pair.r, 1, &s).unwrap();
        let nrd = nrd_decompose(&pair.z_s, &zt, &eps_net, 1, &s).unwrap();
        assert!((nrd.z0_hat.item() - 1.0).abs() < 1e-12);
        assert!((nrd.r_hat.item() - 2.0).abs() < 1e-12);
        assert!(nrd.eps_noise.item().abs() < 1e-12);
    }

    #[test]
    fn nrd_zero_residual() {
        let s = ScheduleTable::with_defaults(10).unwrap();
        let z = t1::<f64>(0.4);
        let eps_net = t1::<f64>(0.9);
        let zt = t1::<f64>(0.0);
        // z_s chosen as z0_hat so r_hat = 0
        let z0_hat = predict_z0(&zt, &eps_net, 5, &s).unwrap();
        let nrd = nrd_decompose(&z0_hat, &zt, &eps_net, 5, &s).unwrap();
        let _ = z;
        assert!(nrd.r_hat.item().abs() < 1e-15);
        assert!((nrd.eps_noise.item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sampler_step_matches_forward_process() {
        // One step from oracle inputs must land exactly on the forward
        // process point at t_prev with the same noise.
        let s = ScheduleTable::with_defaults(20).unwrap();
        let pair = SamplePair::new(t1::<f64>(3.0), t1(1.0)).unwrap();
        let eps = t1::<f64>(0.3);
        for (t, t_prev) in [(20usize, 13usize), (13, 5), (5, 1), (5, 0)] {
            let zp = forward_interpolate(&pair.z_0, &pair.r, t, &s).unwrap();
            let zt = forward_noise(&zp, &eps, t, &s).unwrap();
            let eps_net = compose_epsilon(&eps, &pair.r, t, &s).unwrap();
            let nrd = nrd_decompose(&pair.z_s, &zt, &eps_net, t, &s).unwrap();
            let stepped = sampler_step(&pair.z_s, &nrd, t, t_prev, &s).unwrap();
            let zp_prev = forward_interpolate(&pair.z_0, &pair.r, t_prev, &s).unwrap();
            let want = forward_noise(&zp_prev, &eps, t_prev, &s).unwrap();
            assert!(
                (stepped.item() - want.item()).abs() < 1e-12,
                "t={t} t_prev={t_prev}"
            );
        }
    }

    #[test]
    fn sampler_step_closed_form_pieces() {
        // With alpha_bar(t_prev)=0.64, beta_bar(t_prev)=0.25, z_s=3, r_hat=2:
        // z' = 3 + (0.25 - 1)*2 = 1.5, z = 0.8 * 1.5 = 1.2.
        let z_prime = 3.0 + (0.25 - 1.0) * 2.0;
        assert_eq!(z_prime, 1.5);
        let z = 0.64f64.sqrt() * z_prime;
        assert!((z - 1.2).abs() < 1e-12);
    }

    #[test]
    fn sampler_step_endpoint_t0() {
        let s = ScheduleTable::with_defaults(8).unwrap();
        let z_s = t1::<f64>(3.0);
        let nrd = NrdOutput {
            z0_hat: t1(1.0),
            r_hat: t1(2.0),
            eps_noise: t1(0.77),
            eps_net: t1(0.0),
        };
        let out = sampler_step(&z_s, &nrd, 3, 0, &s).unwrap();
        // alpha_bar(0)=1, beta_bar(0)=0 -> z_s - r_hat exactly
        assert_eq!(out.item(), 1.0);
    }

    #[test]
    fn sampler_step_rejects_bad_order() {
        let s = ScheduleTable::with_defaults(8).unwrap();
        let nrd = NrdOutput {
            z0_hat: t1::<f64>(0.0),
            r_hat: t1(0.0),
            eps_noise: t1(0.0),
            eps_net: t1(0.0),
        };
        assert!(sampler_step(&t1(0.0), &nrd, 3, 3, &s).is_err());
        assert!(sampler_step(&t1(0.0), &nrd, 3, 5, &s).is_err());
    }

    #[test]
    fn ddim_step_basics() {
        let s = ScheduleTable::with_defaults(8).unwrap();
        let z = t1::<f64>(0.0);
        assert_eq!(ddim_step(&z, &t1(0.0), 4, 2, &s).unwrap().item(), 0.0);
        // with exact z0 and t_prev = 0, ddim returns z0
        let z0 = t1::<f64>(0.8);
        let eps = t1::<f64>(0.25);
        let zt = forward_noise(&z0, &eps, 6, &s).unwrap();
        let out = ddim_step(&zt, &eps, 6, 0, &s).unwrap();
        assert!((out.item() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ddim_equals_sampler_when_residual_vanishes() {
        let s = ScheduleTable::with_defaults(30).unwrap();
        let zt = t1::<f64>(0.37);
        let eps_net = t1::<f64>(-0.8);
        for (t, t_prev) in [(30usize, 17usize), (17, 4), (4, 0)] {
            let z0_hat = predict_z0(&zt, &eps_net, t, &s).unwrap();
            // choosing z_s = z0_hat makes r_hat = 0
            let nrd = nrd_decompose(&z0_hat, &zt, &eps_net, t, &s).unwrap();
            assert!(nrd.r_hat.item().abs() < 1e-15);
            let a = sampler_step(&z0_hat, &nrd, t, t_prev, &s).unwrap();
            let b = ddim_step(&zt, &eps_net, t, t_prev, &s).unwrap();
            assert!((a.item() - b.item()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::<f64>::full(&[3, 2, 2], 0.5);
        assert_eq!(training_target_loss(&a, &a).unwrap(), 0.0);
        let b = t1::<f64>(2.0);
        let c = t1::<f64>(1.0);
        assert_eq!(training_target_loss(&b, &c).unwrap(), 1.0);
        let d = a.map(|v| v + 0.25);
        assert!((training_target_loss(&d, &a).unwrap() - 0.0625).abs() < 1e-15);
        let bad = Tensor::<f64>::zeros(&[2]);
        assert!(training_target_loss(&a, &bad).is_err());
    }

    #[test]
    fn oracle_sampling_recovers_z0() {
        let s = ScheduleTable::with_defaults(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z_0 = Tensor::<f64>::randn(&mut rng, &[2, 4, 4]);
        let r = Tensor::<f64>::randn(&mut rng, &[2, 4, 4]).scale(0.5);
        let z_s = z_0.add(&r).unwrap();
        let pair = SamplePair::new(z_s.clone(), z_0.clone()).unwrap();
        let oracle = OracleDenoiser { pair: &pair, sched: &s };
        for n in [1usize, 2, 5, 10, 50] {
            let steps = TimestepSubsequence::make_strided(50, n).unwrap();
            let out = sample(&oracle, &z_s, &s, &steps, 123, None).unwrap();
            assert!(out.max_abs_diff(&z_0) < 1e-9, "steps={n}");
        }
    }

    #[test]
    fn oracle_sampling_zero_residual_returns_input() {
        let s = ScheduleTable::with_defaults(40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_0 = Tensor::<f64>::randn(&mut rng, &[1, 4, 4]);
        let pair = SamplePair::new(z_0.clone(), z_0.clone()).unwrap();
        let oracle = OracleDenoiser { pair: &pair, sched: &s };
        let steps = TimestepSubsequence::make_strided(40, 5).unwrap();
        let out = sample(&oracle, &z_0, &s, &steps, 9, None).unwrap();
        assert!(out.max_abs_diff(&z_0) < 1e-9);
    }

    #[test]
    fn sample_deterministic_given_seed() {
        let s = ScheduleTable::with_defaults(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z_0 = Tensor::<f64>::randn(&mut rng, &[1, 3, 3]);
        let r = Tensor::<f64>::randn(&mut rng, &[1, 3, 3]);
        let z_s = z_0.add(&r).unwrap();
        let pair = SamplePair::new(z_s.clone(), z_0).unwrap();
        let oracle = OracleDenoiser { pair: &pair, sched: &s };
        let steps = TimestepSubsequence::make_strided(30, 6).unwrap();
        let a = sample(&oracle, &z_s, &s, &steps, 42, None).unwrap();
        let b = sample(&oracle, &z_s, &s, &steps, 42, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_reads_shadow_latent_each_step() {
        // Non-Markov contract: perturbing z_s changes the NRD step; the DDIM
        // update has no z_s argument at all.
        let s = ScheduleTable::with_defaults(20).unwrap();
        let nrd = NrdOutput {
            z0_hat: t1::<f64>(1.0),
            r_hat: t1(0.5),
            eps_noise: t1(0.2),
            eps_net: t1(0.0),
        };
        let a = sampler_step(&t1(1.5), &nrd, 10, 5, &s).unwrap();
        let b = sampler_step(&t1(1.6), &nrd, 10, 5, &s).unwrap();
        assert!((a.item() - b.item()).abs() > 1e-6);
    }
}
