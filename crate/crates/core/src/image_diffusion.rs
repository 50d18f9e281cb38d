//! The residual-shifting Gaussian chain over latents.
//!
//! The forward process drifts the clean latent z_0 toward the degraded latent
//! z_y by injecting fractions α_t of the residual e_0 = z_y − z_0 along with
//! Gaussian noise scaled by κ:
//!
//! - single step: z_t = z_{t−1} + α_t·e_0 + κ·√α_t·ε
//! - closed-form marginal: z_t = z_0 + η_t·e_0 + κ·√η_t·ε
//! - inference start: z_T = z_y + κ·ε
//! - reverse posterior: z_{t−1} = (η_{t−1}/η_t)·z_t + (α_t/η_t)·ẑ_0
//!   + κ·√((η_{t−1}/η_t)·α_t)·ε, which is exact (variance 0, output ẑ_0)
//!   at t = 1 because η_0 = 0.
//!
//! Noise tensors are always passed in by the caller; these functions are pure.

use crate::error::{Error, Result};
use crate::image::LatentTensor;
use crate::schedules::ShiftSchedule;

fn check_shapes(tensors: &[&LatentTensor]) -> Result<()> {
    for t in &tensors[1..] {
        if !tensors[0].same_shape(t) {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes differ: {:?} vs {:?}",
                tensors[0].tensor().shape(),
                t.tensor().shape()
            )));
        }
    }
    Ok(())
}

fn check_t(t: usize, lo: usize, sched: &ShiftSchedule) -> Result<()> {
    if t < lo || t > sched.t_total() {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside [{lo}, {}]",
            sched.t_total()
        )));
    }
    Ok(())
}

/// Combines equally shaped latents as `Σ coef_i · x_i`.
fn combine(parts: &[(&LatentTensor, f64)]) -> LatentTensor {
    let n = parts[0].0.data().len();
    let mut out = vec![0.0; n];
    for (tensor, coef) in parts {
        if *coef == 0.0 {
            continue; // exactness: never let a 0-coefficient term perturb bits
        }
        for (o, &v) in out.iter_mut().zip(tensor.data()) {
            *o += coef * v;
        }
    }
    LatentTensor::new(
        autograd::Tensor::new(parts[0].0.tensor().shape().to_vec(), out).expect("shape preserved"),
    )
    .expect("finite combination")
}

/// One forward step: `z_prev + α_t·e0 + κ·√α_t·noise`, for t ∈ [1, T].
pub fn forward_step(
    z_prev: &LatentTensor,
    e0: &LatentTensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    check_t(t, 1, sched)?;
    check_shapes(&[z_prev, e0, noise])?;
    let a = sched.alpha(t);
    Ok(combine(&[(z_prev, 1.0), (e0, a), (noise, sched.kappa() * a.sqrt())]))
}

/// Closed-form marginal: `z0 + η_t·e0 + κ·√η_t·noise`, for t ∈ [0, T].
/// At t = 0 this returns z0 bit-exactly (η_0 = 0).
pub fn forward_marginal(
    z0: &LatentTensor,
    e0: &LatentTensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    check_t(t, 0, sched)?;
    check_shapes(&[z0, e0, noise])?;
    let eta = sched.eta(t);
    Ok(combine(&[(z0, 1.0), (e0, eta), (noise, sched.kappa() * eta.sqrt())]))
}

/// Inference initialization `z_T = z_y + κ·noise` (the √η_T ≈ 1 form; the
/// discrepancy against the exact marginal is at most κ·(1 − √η_T)).
pub fn init_inference(
    z_y: &LatentTensor,
    sched: &ShiftSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    check_shapes(&[z_y, noise])?;
    Ok(combine(&[(z_y, 1.0), (noise, sched.kappa())]))
}

/// Reverse posterior step given the prediction ẑ_0, for t ∈ [1, T]:
/// mean `(η_{t−1}/η_t)·z_t + (α_t/η_t)·ẑ_0`, noise scale
/// `κ·√((η_{t−1}/η_t)·α_t)`. At t = 1 both the z_t coefficient and the
/// noise scale vanish and the output is exactly ẑ_0.
pub fn reverse_step(
    z_t: &LatentTensor,
    z0_hat: &LatentTensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    check_t(t, 1, sched)?;
    check_shapes(&[z_t, z0_hat, noise])?;
    let (eta_prev, eta_t, a) = (sched.eta(t - 1), sched.eta(t), sched.alpha(t));
    let carry = eta_prev / eta_t;
    let sigma = sched.kappa() * (carry * a).sqrt();
    Ok(combine(&[(z_t, carry), (z0_hat, a / eta_t), (noise, sigma)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::{standard_normal, Tensor};
    use crate::rng::stream;
    use crate::schedules::make_shift_schedule;

    fn scalar(v: f64) -> LatentTensor {
        LatentTensor::new(Tensor::new(vec![1, 1, 1], vec![v]).unwrap()).unwrap()
    }

    fn filled(c: usize, h: usize, w: usize, v: f64) -> LatentTensor {
        LatentTensor::new(Tensor::full(&[c, h, w], v)).unwrap()
    }

    #[test]
    fn forward_step_drift_only() {
        // Synthetic schedule with a visible α_2 = 0.25.
        let s = ShiftSchedule::from_raw(vec![0.0, 0.25, 0.5, 0.75, 1.0], 2.0);
        let out = forward_step(&filled(1, 2, 2, 0.0), &filled(1, 2, 2, 1.0), 2, &s,
                               &filled(1, 2, 2, 0.0)).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.25);
        }
        // Zero residual and zero noise: identity.
        let z = filled(1, 2, 2, 0.83);
        let out = forward_step(&z, &filled(1, 2, 2, 0.0), 3, &s, &filled(1, 2, 2, 0.0)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn forward_step_moments_match_monte_carlo() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let (z_prev, e0, t) = (0.4, -1.3, 7);
        let mut rng = stream(42, 0, 0, "fs-mc");
        let n = 20_000usize;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let noise = scalar(standard_normal(&mut rng));
            let v = forward_step(&scalar(z_prev), &scalar(e0), t, &s, &noise).unwrap().data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let true_mean = z_prev + s.alpha(t) * e0;
        let true_var = s.kappa().powi(2) * s.alpha(t);
        let se_mean = true_var.sqrt() / (n as f64).sqrt();
        let se_var = true_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - true_mean).abs() < 3.0 * se_mean);
        assert!((var - true_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn marginal_endpoints() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let z0 = filled(2, 2, 3, 0.31);
        let e0 = filled(2, 2, 3, -0.7);
        let noise = filled(2, 2, 3, 0.9);
        // t = 0: z0 unchanged bit-for-bit even with nonzero noise input.
        assert_eq!(forward_marginal(&z0, &e0, 0, &s, &noise).unwrap(), z0);
        // t = T with η_T = 1 exactly and no noise: lands on z_y = z0 + e0.
        let s1 = ShiftSchedule::from_raw(vec![0.0, 0.5, 1.0], 2.0);
        let out = forward_marginal(&z0, &e0, 2, &s1, &filled(2, 2, 3, 0.0)).unwrap();
        for &v in out.data() {
            assert!((v - (0.31 - 0.7)).abs() < 1e-15);
        }
    }

    #[test]
    fn composed_steps_match_marginal_moments() {
        // Telescoping composition: running the per-step chain t times agrees
        // with the closed-form marginal in mean and variance (scalar MC).
        let s = make_shift_schedule(8, 0.005, 0.995, 1.5).unwrap();
        let (z0, e0, t_target) = (-0.2, 0.9, 5usize);
        let n = 20_000usize;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        let mut rng = stream(43, 0, 0, "compose-mc");
        for _ in 0..n {
            let mut z = scalar(z0);
            for t in 1..=t_target {
                let noise = scalar(standard_normal(&mut rng));
                z = forward_step(&z, &scalar(e0), t, &s, &noise).unwrap();
            }
            let v = z.data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let true_mean = z0 + s.eta(t_target) * e0;
        let true_var = s.kappa().powi(2) * s.eta(t_target);
        assert!((mean - true_mean).abs() < 3.0 * true_var.sqrt() / (n as f64).sqrt());
        assert!((var - true_var).abs() < 3.0 * true_var * (2.0 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn init_inference_identities_and_variance() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let z_y = filled(1, 2, 2, 0.44);
        assert_eq!(init_inference(&z_y, &s, &filled(1, 2, 2, 0.0)).unwrap(), z_y);
        // κ → 0 limit: output equals z_y regardless of noise.
        let s0 = ShiftSchedule::from_raw(vec![0.0, 0.5, 1.0], 1e-300);
        let out = init_inference(&z_y, &s0, &filled(1, 2, 2, 123.0)).unwrap();
        for &v in out.data() {
            assert!((v - 0.44).abs() < 1e-9);
        }
        // Sample variance ≈ κ².
        let mut rng = stream(44, 0, 0, "init-mc");
        let n = 20_000usize;
        let vals: Vec<f64> = (0..n)
            .map(|_| init_inference(&scalar(0.0), &s, &scalar(standard_normal(&mut rng)))
                .unwrap()
                .data()[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let true_var = 4.0;
        assert!((var - true_var).abs() < 3.0 * true_var * (2.0 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn reverse_step_is_exact_at_t1() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let z_t = filled(3, 2, 2, 5.0);
        let z0_hat = filled(3, 2, 2, -1.25);
        let noise = filled(3, 2, 2, 999.0);
        let out = reverse_step(&z_t, &z0_hat, 1, &s, &noise).unwrap();
        assert_eq!(out, z0_hat); // bit-exact: η_0 = 0 kills both terms
    }

    #[test]
    fn reverse_coefficients_are_convex() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        for t in 1..=18 {
            let a = s.eta(t - 1) / s.eta(t);
            let b = s.alpha(t) / s.eta(t);
            assert!(a >= 0.0 && b >= 0.0);
            assert!((a + b - 1.0).abs() < 1e-12, "t={t}: {a} + {b}");
        }
    }

    #[test]
    fn reverse_step_matches_grid_bayes_product() {
        // Oracle: the reverse posterior over x = z_{t−1} is proportional to
        //   N(x; z_t − α_t·e0, κ²α_t) · N(x; z0 + η_{t−1}·e0, κ²η_{t−1}),
        // both factors read straight off the generative definition. Midpoint
        // quadrature of that product converges exponentially fast for
        // Gaussians, so grid moments are exact to machine precision.
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let mut rng = stream(45, 0, 0, "grid-bayes");
        for trial in 0..10 {
            let z0 = 2.0 * standard_normal(&mut rng);
            let e0 = 2.0 * standard_normal(&mut rng);
            let z_t = 2.0 * standard_normal(&mut rng);
            let t = 2 + (trial % 17);
            let (m1, v1) = (z_t - s.alpha(t) * e0, s.kappa().powi(2) * s.alpha(t));
            let (m2, v2) = (z0 + s.eta(t - 1) * e0, s.kappa().powi(2) * s.eta(t - 1));
            let lo = (m1.min(m2)) - 12.0 * (v1.sqrt() + v2.sqrt());
            let hi = (m1.max(m2)) + 12.0 * (v1.sqrt() + v2.sqrt());
            let step = v1.sqrt().min(v2.sqrt()) / 8.0;
            let n = ((hi - lo) / step).ceil() as usize;
            let (mut p0, mut p1, mut p2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * step;
                let logp = -(x - m1) * (x - m1) / (2.0 * v1) - (x - m2) * (x - m2) / (2.0 * v2);
                let p = logp.exp();
                p0 += p;
                p1 += p * x;
                p2 += p * x * x;
            }
            let mean = p1 / p0;
            let var = p2 / p0 - mean * mean;
            // Closed form, with ẑ_0 := z0 (the oracle isolates the algebra).
            let cf_mean = (s.eta(t - 1) / s.eta(t)) * z_t + (s.alpha(t) / s.eta(t)) * z0;
            let cf_var = s.kappa().powi(2) * (s.eta(t - 1) / s.eta(t)) * s.alpha(t);
            assert!(
                ((mean - cf_mean) / cf_mean.abs().max(1.0)).abs() < 1e-8,
                "t={t}: mean {mean} vs {cf_mean}"
            );
            assert!(((var - cf_var) / cf_var).abs() < 1e-8, "t={t}: var {var} vs {cf_var}");
        }
    }

    #[test]
    fn shape_and_range_violations_are_rejected() {
        let s = make_shift_schedule(18, 0.005, 0.9999, 2.0).unwrap();
        let a = filled(1, 2, 2, 0.0);
        let b = filled(1, 2, 3, 0.0);
        assert!(forward_step(&a, &b, 1, &s, &a).is_err());
        assert!(forward_step(&a, &a, 0, &s, &a).is_err());
        assert!(forward_step(&a, &a, 19, &s, &a).is_err());
        assert!(forward_marginal(&a, &a, 19, &s, &a).is_err());
        assert!(reverse_step(&a, &a, 0, &s, &a).is_err());
        assert!(init_inference(&a, &s, &b).is_err());
    }
}
