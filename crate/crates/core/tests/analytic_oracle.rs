//! Monte-Carlo verification of the closed-form denoisers and of the forward
//! posterior parameters.

use diffaug::denoisers::analytic_gaussian_eps;
use diffaug::diffusion::{posterior_params, q_sample};
use diffaug::numerics::Grid;
use diffaug::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn regression_of_noise_on_noisy_sample_matches_closed_form() {
    // draw (x0, eps) pairs, regress eps on x_t, and compare the fitted slope
    // and intercept against the closed-form conditional expectation
    let sched = schedule();
    let (mu, sigma0) = (0.7f64, 0.8f64);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for &t in &[250usize, 600, 900] {
        let n = 1_000_000usize;
        let (a, s) = sched.marginal_coeffs_at(t as f64);
        let mut sum_x = 0.0f64;
        let mut sum_e = 0.0f64;
        let mut sum_xx = 0.0f64;
        let mut sum_xe = 0.0f64;
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let x0 = mu + sigma0 * z0;
            let x_t = a * x0 + s * eps;
            sum_x += x_t;
            sum_e += eps;
            sum_xx += x_t * x_t;
            sum_xe += x_t * eps;
        }
        let nf = n as f64;
        let cov = sum_xe / nf - (sum_x / nf) * (sum_e / nf);
        let var = sum_xx / nf - (sum_x / nf) * (sum_x / nf);
        let slope_mc = cov / var;
        let slope_exact = s / (a * a * sigma0 * sigma0 + s * s);
        assert!(
            (slope_mc - slope_exact).abs() / slope_exact.abs() < 0.01,
            "t={t}: MC slope {slope_mc} vs closed form {slope_exact}"
        );
        // the closed-form prediction at a probe point agrees with the
        // regression line within the same tolerance
        let probe = 0.3f32;
        let pred = analytic_gaussian_eps(
            &Grid::scalar(mu as f32),
            sigma0,
            &Grid::scalar(probe),
            t as f64,
            &sched,
        )
        .unwrap()
        .item() as f64;
        let line = slope_mc * (probe as f64 - sum_x / nf) + sum_e / nf;
        assert!(
            (pred - line).abs() < 0.01 * pred.abs().max(0.1),
            "t={t}: closed form {pred} vs regression line {line}"
        );
    }
}

#[test]
fn hierarchical_posterior_sampling_matches_forward_marginal() {
    // x_{t-1} sampled as q(x_t | x0) followed by the posterior of x_{t-1}
    // given (x_t, x0) must reproduce the direct marginal q(x_{t-1} | x0);
    // compare by Kolmogorov-Smirnov distance against the exact normal CDF
    let sched = schedule();
    let x0_val = 0.9f32;
    let x0 = Grid::scalar(x0_val);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for &t in &[2usize, 120, 700] {
        let n = 10_000usize;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = Grid::standard_normal(&[1], &mut rng);
            let x_t = q_sample(&x0, t, &eps, &sched).unwrap();
            let (mean, var) = posterior_params(&x0, &x_t, t, &sched).unwrap();
            let z: f64 = rng.sample(StandardNormal);
            draws.push(mean.item() as f64 + var.sqrt() * z);
        }
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let a_prev = sched.alpha_bar(t - 1).sqrt();
        let s_prev = sched.sigma(t - 1);
        let exact = Normal::new(a_prev * x0_val as f64, s_prev.max(1e-12)).unwrap();
        let mut ks = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let cdf = exact.cdf(x);
            let hi = (i + 1) as f64 / n as f64;
            let lo = i as f64 / n as f64;
            ks = ks.max((cdf - hi).abs()).max((cdf - lo).abs());
        }
        assert!(ks < 0.02, "t={t}: KS distance {ks}");
    }
}
