//! Scalar (1-D, `f64`) reverse-time integrators.
//!
//! The grid samplers share their update coefficients with this module; here
//! the state is a single `f64`, which makes distribution-level studies
//! (Wasserstein distance against a known law, convergence-order
//! measurements) cheap enough to run by the tens of thousands.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use super::coeffs::{self, StepPoint};
use super::{Method, Prediction};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimeSpacing};
use crate::train;

/// Scalar noise predictor.
pub trait ScalarEpsModel: Sync {
    fn eps(&self, x: f64, t: f64) -> f64;
}

/// Closed-form optimal predictor for scalar data `N(mu, sigma0^2)`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarGaussianEps {
    pub mu: f64,
    pub sigma0: f64,
}

impl ScalarGaussianEps {
    pub fn eps_at(&self, x: f64, t: f64, schedule: &NoiseSchedule) -> f64 {
        let (a, s) = schedule.marginal_coeffs_at(t);
        (x - a * self.mu) * s / (a * a * self.sigma0 * self.sigma0 + s * s)
    }
}

/// A scalar model bound to its schedule.
pub struct BoundScalarGaussian<'a> {
    pub model: ScalarGaussianEps,
    pub schedule: &'a NoiseSchedule,
}

impl ScalarEpsModel for BoundScalarGaussian<'_> {
    fn eps(&self, x: f64, t: f64) -> f64 {
        self.model.eps_at(x, t, self.schedule)
    }
}

fn x0_from_eps(x: f64, eps: f64, p: &StepPoint) -> f64 {
    (x - p.sigma * eps) / p.alpha
}

/// Integrate the probability-flow ODE from `x_start` at `t = T` down to
/// `t = 1` with `num_steps` intervals. The final interval always runs first
/// order; the multistep method also starts first order until history exists.
pub fn run_ode(
    model: &dyn ScalarEpsModel,
    schedule: &NoiseSchedule,
    method: Method,
    prediction: Prediction,
    num_steps: usize,
    spacing: TimeSpacing,
    x_start: f64,
) -> Result<f64> {
    if matches!(method, Method::Ancestral) {
        return Err(Error::invalid("run_ode handles ODE methods only"));
    }
    let times = schedule.solver_times(num_steps, spacing)?;
    let mut x = x_start;
    let mut history: Option<(f64, f64)> = None; // (lambda, x0_pred)
    for i in 0..num_steps {
        let prev = StepPoint::at(schedule, times[i]);
        let next = StepPoint::at(schedule, times[i + 1]);
        let last = i + 1 == num_steps;
        x = match method {
            Method::FirstOrder => scalar_first_order(model, &prev, &next, prediction, x),
            Method::Dpm2s => {
                if last {
                    scalar_first_order(model, &prev, &next, prediction, x)
                } else {
                    scalar_second_order(model, schedule, &prev, &next, prediction, x)?
                }
            }
            Method::Dpm2m => {
                let eps = model.eps(x, prev.t);
                let x0 = x0_from_eps(x, eps, &prev);
                let out = match history {
                    Some((lambda_pp, x0_prev)) if !last => {
                        let c =
                            coeffs::multistep_data(&prev, &next, prev.lambda - lambda_pp);
                        c.keep * x + c.cur * x0 + c.prev * x0_prev
                    }
                    _ => {
                        let c = coeffs::first_order_data(&prev, &next);
                        c.keep * x + c.pred * x0
                    }
                };
                history = Some((prev.lambda, x0));
                out
            }
            Method::Ancestral => unreachable!(),
        };
        if !x.is_finite() {
            return Err(Error::NonFinite("scalar ODE state".into()));
        }
    }
    Ok(x)
}

/// One first-order step of the scalar integrator.
pub fn scalar_first_order(
    model: &dyn ScalarEpsModel,
    prev: &StepPoint,
    next: &StepPoint,
    prediction: Prediction,
    x: f64,
) -> f64 {
    let eps = model.eps(x, prev.t);
    match prediction {
        Prediction::Epsilon => {
            let c = coeffs::first_order_eps(prev, next);
            c.keep * x + c.pred * eps
        }
        Prediction::Data => {
            let c = coeffs::first_order_data(prev, next);
            c.keep * x + c.pred * x0_from_eps(x, eps, prev)
        }
    }
}

/// One second-order single step (midpoint evaluation) of the scalar
/// integrator.
pub fn scalar_second_order(
    model: &dyn ScalarEpsModel,
    schedule: &NoiseSchedule,
    prev: &StepPoint,
    next: &StepPoint,
    prediction: Prediction,
    x: f64,
) -> Result<f64> {
    let lambda_mid = 0.5 * (prev.lambda + next.lambda);
    let t_mid = schedule.t_of_lambda(lambda_mid)?;
    let mid = StepPoint::at(schedule, t_mid);
    let eps_start = model.eps(x, prev.t);
    let u = match prediction {
        Prediction::Epsilon => {
            let c = coeffs::first_order_eps(prev, &mid);
            c.keep * x + c.pred * eps_start
        }
        Prediction::Data => {
            let c = coeffs::first_order_data(prev, &mid);
            c.keep * x + c.pred * x0_from_eps(x, eps_start, prev)
        }
    };
    let eps_mid = model.eps(u, mid.t);
    Ok(match prediction {
        Prediction::Epsilon => {
            let c = coeffs::second_order_eps(prev, next);
            c.keep * x + c.pred_start * eps_start + c.pred_mid * eps_mid
        }
        Prediction::Data => {
            let c = coeffs::second_order_data(prev, next);
            let x0_start = x0_from_eps(x, eps_start, prev);
            let x0_mid = x0_from_eps(u, eps_mid, &mid);
            c.keep * x + c.pred_start * x0_start + c.pred_mid * x0_mid
        }
    })
}

/// Full-length stochastic reverse chain from `x_start` at `t = T`; the final
/// step adds no noise.
pub fn run_ancestral(
    model: &dyn ScalarEpsModel,
    schedule: &NoiseSchedule,
    use_beta_variance: bool,
    x_start: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut x = x_start;
    for t in (1..=schedule.t_count()).rev() {
        let eps = model.eps(x, t as f64);
        let beta = schedule.beta(t);
        let sigma = schedule.sigma(t);
        let mean = (x - beta / sigma * eps) / schedule.alpha(t).sqrt();
        x = if t == 1 {
            mean
        } else {
            let var = if use_beta_variance {
                beta
            } else {
                schedule.posterior_variance(t)
            };
            let z: f64 = rng.sample(StandardNormal);
            mean + var.sqrt() * z
        };
    }
    x
}

/// Draw `n` samples by integrating from standard-normal starts; trajectory
/// `i` uses the stream derived from `(seed, i)`.
pub fn sample_scalar(
    model: &dyn ScalarEpsModel,
    schedule: &NoiseSchedule,
    method: Method,
    prediction: Prediction,
    num_steps: usize,
    spacing: TimeSpacing,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = train::derive_rng(seed, 0x5343_4c52, i as u64);
        let x_start: f64 = rng.sample(StandardNormal);
        let x = match method {
            Method::Ancestral => run_ancestral(model, schedule, false, x_start, &mut rng),
            _ => run_ode(model, schedule, method, prediction, num_steps, spacing, x_start)?,
        };
        out.push(x);
    }
    Ok(out)
}

/// Empirical first Wasserstein distance between `samples` and `N(mu, sigma)`
/// via quantile matching. `sigma = 0` degenerates to the mean absolute
/// deviation from `mu`.
pub fn wasserstein1_to_gaussian(samples: &mut [f64], mu: f64, sigma: f64) -> f64 {
    assert!(!samples.is_empty());
    if sigma == 0.0 {
        return samples.iter().map(|x| (x - mu).abs()).sum::<f64>() / samples.len() as f64;
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(mu, sigma).expect("valid normal");
    let n = samples.len();
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let q = normal.inverse_cdf((i as f64 + 0.5) / n as f64);
            (x - q).abs()
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn w1_of_matching_gaussian_samples_is_small() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut xs: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                1.5 + 0.5 * z
            })
            .collect();
        let w1 = wasserstein1_to_gaussian(&mut xs, 1.5, 0.5);
        assert!(w1 < 0.01, "w1 = {w1}");
        let mut ys = vec![0.0f64; 100];
        let shifted = wasserstein1_to_gaussian(&mut ys, 1.0, 0.0);
        assert!((shifted - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_first_order_step_solves_point_mass_exactly() {
        // for sigma0 = 0 the noise prediction is constant along the exact
        // trajectory, so a single step reaches the closed-form endpoint
        let s = schedule();
        let model = BoundScalarGaussian {
            model: ScalarGaussianEps { mu: 2.0, sigma0: 0.0 },
            schedule: &s,
        };
        for &z in &[-1.5f64, 0.2, 1.0] {
            let p_start = StepPoint::at(&s, 1000.0);
            let x_start = p_start.alpha * 2.0 + p_start.sigma * z;
            let x = run_ode(
                &model,
                &s,
                Method::FirstOrder,
                Prediction::Epsilon,
                1,
                TimeSpacing::UniformT,
                x_start,
            )
            .unwrap();
            let p_end = StepPoint::at(&s, 1.0);
            let exact = p_end.alpha * 2.0 + p_end.sigma * z;
            assert!(
                (x - exact).abs() < 1e-9,
                "z={z}: one-step {x} vs exact {exact}"
            );
            // and the endpoint is within 1% of the data mean
            assert!((x - 2.0).abs() < 0.02 * 2.0);
        }
    }

    #[test]
    fn gaussian_stats_recovered_by_multistep() {
        let s = schedule();
        let model = BoundScalarGaussian {
            model: ScalarGaussianEps { mu: 3.0, sigma0: 0.5 },
            schedule: &s,
        };
        let xs = sample_scalar(
            &model,
            &s,
            Method::Dpm2m,
            Prediction::Data,
            20,
            TimeSpacing::UniformT,
            10_000,
            11,
        )
        .unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
        assert!((std - 0.5).abs() / 0.5 < 0.03, "std {std}");
    }

    #[test]
    fn ancestral_chain_recovers_gaussian_stats() {
        use rand::SeedableRng;
        let s = NoiseSchedule::linear(250, 4e-4, 0.05).unwrap();
        let model = BoundScalarGaussian {
            model: ScalarGaussianEps { mu: -1.0, sigma0: 0.8 },
            schedule: &s,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            xs.push(run_ancestral(&model, &s, false, z, &mut rng));
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean + 1.0).abs() < 0.03, "mean {mean}");
        assert!((var.sqrt() - 0.8).abs() / 0.8 < 0.03, "std {}", var.sqrt());
    }
}
