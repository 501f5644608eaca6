//! Closed-form optimal denoisers for Gaussian and Gaussian-mixture data.
//!
//! When the clean data is `N(mu, sigma0^2 I)` and `x_t = a x0 + s eps` with
//! `a = sqrt(alpha_bar)`, `s = sqrt(1 - alpha_bar)`, the conditional
//! expectation of the noise given `x_t` is available in closed form:
//!
//! ```text
//! E[eps | x_t] = (x_t - a mu) s / (a^2 sigma0^2 + s^2)
//! ```
//!
//! These models are the Bayes-optimal predictors for their data law, which
//! makes them exact reference points for solver and training diagnostics.

use std::sync::Arc;

use super::EpsilonModel;
use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::schedule::NoiseSchedule;

/// `E[eps | x_t]` for data `N(mu, sigma0^2 I)`.
pub fn analytic_gaussian_eps(
    mu: &Grid,
    sigma0: f64,
    x_t: &Grid,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Grid> {
    x_t.require_same_shape(mu, "analytic_gaussian_eps")?;
    let (a, s) = schedule.marginal_coeffs_at(t);
    let denom = a * a * sigma0 * sigma0 + s * s;
    let scale = s / denom;
    x_t.zip_map(mu, "analytic_gaussian_eps", |x, m| {
        ((x as f64 - a * m as f64) * scale) as f32
    })
}

/// Gaussian data oracle with isotropic standard deviation `sigma0 >= 0`
/// (zero selects a point mass at `mu`).
#[derive(Clone, Debug)]
pub struct AnalyticGaussianModel {
    mu: Grid,
    sigma0: f64,
    schedule: Arc<NoiseSchedule>,
}

impl AnalyticGaussianModel {
    pub fn new(mu: Grid, sigma0: f64, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        if sigma0 < 0.0 {
            return Err(Error::invalid(format!("sigma0 {sigma0} must be >= 0")));
        }
        Ok(AnalyticGaussianModel { mu, sigma0, schedule })
    }

    pub fn mu(&self) -> &Grid {
        &self.mu
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl EpsilonModel for AnalyticGaussianModel {
    fn predict(&self, x_t: &Grid, t: f64, _label: Option<usize>) -> Result<Grid> {
        analytic_gaussian_eps(&self.mu, self.sigma0, x_t, t, &self.schedule)
    }
}

/// One mixture component: prior weight, mean grid, isotropic std.
#[derive(Clone, Debug)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: Grid,
    pub sigma0: f64,
}

/// Posterior-responsibility blend of per-component Gaussian denoisers.
///
/// A class label selects a single component (the class-conditional data
/// law); `None` uses the full mixture. Responsibilities are computed in
/// log space with max subtraction.
#[derive(Clone, Debug)]
pub struct AnalyticMixtureModel {
    components: Vec<MixtureComponent>,
    schedule: Arc<NoiseSchedule>,
}

impl AnalyticMixtureModel {
    pub fn new(components: Vec<MixtureComponent>, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let shape = components[0].mu.shape().to_vec();
        for c in &components {
            if c.weight <= 0.0 {
                return Err(Error::invalid(format!("component weight {} must be > 0", c.weight)));
            }
            if c.sigma0 < 0.0 {
                return Err(Error::invalid(format!("sigma0 {} must be >= 0", c.sigma0)));
            }
            if c.mu.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "mixture components",
                    lhs: shape,
                    rhs: c.mu.shape().to_vec(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "component weights sum to {total}, expected 1 within 1e-9"
            )));
        }
        Ok(AnalyticMixtureModel { components, schedule })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Posterior responsibilities of each component given `x_t`.
    pub fn responsibilities(&self, x_t: &Grid, t: f64) -> Result<Vec<f64>> {
        let (a, s) = self.schedule.marginal_coeffs_at(t);
        let mut log_r = Vec::with_capacity(self.components.len());
        for c in &self.components {
            x_t.require_same_shape(&c.mu, "responsibilities")?;
            let var = a * a * c.sigma0 * c.sigma0 + s * s;
            let mut ll = c.weight.ln();
            for (x, m) in x_t.data().iter().zip(c.mu.data()) {
                let d = *x as f64 - a * *m as f64;
                ll -= 0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
            }
            log_r.push(ll);
        }
        let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = r.iter().sum();
        for v in &mut r {
            *v /= z;
        }
        Ok(r)
    }
}

/// Responsibility-weighted combination of per-component predictions.
pub fn analytic_mixture_eps(
    model: &AnalyticMixtureModel,
    x_t: &Grid,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Grid> {
    let r = model.responsibilities(x_t, t)?;
    let mut out = Grid::zeros(x_t.shape());
    for (c, weight) in model.components.iter().zip(r) {
        let eps = analytic_gaussian_eps(&c.mu, c.sigma0, x_t, t, schedule)?;
        let acc = out.data_mut();
        for (o, e) in acc.iter_mut().zip(eps.data()) {
            *o += (weight * *e as f64) as f32;
        }
    }
    Ok(out)
}

impl EpsilonModel for AnalyticMixtureModel {
    fn predict(&self, x_t: &Grid, t: f64, label: Option<usize>) -> Result<Grid> {
        match label {
            Some(k) => {
                let c = self.components.get(k).ok_or_else(|| {
                    Error::invalid(format!(
                        "label {k} out of range for {} mixture components",
                        self.components.len()
                    ))
                })?;
                analytic_gaussian_eps(&c.mu, c.sigma0, x_t, t, &self.schedule)
            }
            None => analytic_mixture_eps(self, x_t, t, &self.schedule),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> Arc<NoiseSchedule> {
        Arc::new(NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap())
    }

    #[test]
    fn point_mass_inverts_forward_map() {
        // sigma0 = 0: eps_hat = (x_t - a mu) / s exactly
        let sched = schedule();
        let mu = Grid::new(vec![2], vec![1.5, -0.5]).unwrap();
        let x_t = Grid::new(vec![2], vec![0.3, 0.9]).unwrap();
        let t = 400.0;
        let (a, s) = sched.marginal_coeffs_at(t);
        let eps = analytic_gaussian_eps(&mu, 0.0, &x_t, t, &sched).unwrap();
        for i in 0..2 {
            let expected = (x_t.data()[i] as f64 - a * mu.data()[i] as f64) / s;
            assert!((eps.data()[i] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_prior_shrinks_by_sigma() {
        // mu = 0, sigma0 = 1: denominator is exactly 1, eps_hat = s * x_t
        let sched = schedule();
        let mu = Grid::zeros(&[3]);
        let x_t = Grid::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        let t = 700.0;
        let (_, s) = sched.marginal_coeffs_at(t);
        let eps = analytic_gaussian_eps(&mu, 1.0, &x_t, t, &sched).unwrap();
        for i in 0..3 {
            assert!((eps.data()[i] as f64 - s * x_t.data()[i] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn single_component_mixture_equals_gaussian() {
        let sched = schedule();
        let mu = Grid::new(vec![2], vec![0.4, -1.0]).unwrap();
        let mix = AnalyticMixtureModel::new(
            vec![MixtureComponent {
                weight: 1.0,
                mu: mu.clone(),
                sigma0: 0.3,
            }],
            sched.clone(),
        )
        .unwrap();
        let x_t = Grid::new(vec![2], vec![0.2, 0.7]).unwrap();
        let a = analytic_mixture_eps(&mix, &x_t, 250.0, &sched).unwrap();
        let b = analytic_gaussian_eps(&mu, 0.3, &x_t, 250.0, &sched).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn symmetric_components_average_at_midpoint() {
        let sched = schedule();
        let m = 2.0f32;
        let mix = AnalyticMixtureModel::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(m),
                    sigma0: 0.2,
                },
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(-m),
                    sigma0: 0.2,
                },
            ],
            sched.clone(),
        )
        .unwrap();
        let x_t = Grid::scalar(0.0);
        let t = 300.0;
        let r = mix.responsibilities(&x_t, t).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        let blended = analytic_mixture_eps(&mix, &x_t, t, &sched).unwrap();
        let e0 = analytic_gaussian_eps(&Grid::scalar(m), 0.2, &x_t, t, &sched).unwrap();
        let e1 = analytic_gaussian_eps(&Grid::scalar(-m), 0.2, &x_t, t, &sched).unwrap();
        let avg = 0.5 * (e0.item() + e1.item());
        assert!((blended.item() - avg).abs() < 1e-7);
    }

    #[test]
    fn deep_basin_matches_single_component() {
        // x_t far inside one component's basin: responsibility -> 1
        let sched = schedule();
        let mix = AnalyticMixtureModel::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(3.0),
                    sigma0: 0.1,
                },
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(-3.0),
                    sigma0: 0.1,
                },
            ],
            sched.clone(),
        )
        .unwrap();
        let t = 10.0; // low noise keeps basins far apart
        let x_t = Grid::scalar(2.9);
        let blended = analytic_mixture_eps(&mix, &x_t, t, &sched).unwrap();
        let solo = analytic_gaussian_eps(&Grid::scalar(3.0), 0.1, &x_t, t, &sched).unwrap();
        assert!((blended.item() - solo.item()).abs() < 1e-6);
    }

    #[test]
    fn label_routes_to_component() {
        let sched = schedule();
        let mix = AnalyticMixtureModel::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(1.0),
                    sigma0: 0.0,
                },
                MixtureComponent {
                    weight: 0.5,
                    mu: Grid::scalar(-1.0),
                    sigma0: 0.0,
                },
            ],
            sched.clone(),
        )
        .unwrap();
        let x_t = Grid::scalar(0.5);
        let conditional = mix.predict(&x_t, 100.0, Some(1)).unwrap();
        let direct = analytic_gaussian_eps(&Grid::scalar(-1.0), 0.0, &x_t, 100.0, &sched).unwrap();
        assert_eq!(conditional.data(), direct.data());
        assert!(mix.predict(&x_t, 100.0, Some(2)).is_err());
    }

    #[test]
    fn weights_must_normalize() {
        let sched = schedule();
        let result = AnalyticMixtureModel::new(
            vec![
                MixtureComponent {
                    weight: 0.6,
                    mu: Grid::scalar(0.0),
                    sigma0: 0.1,
                },
                MixtureComponent {
                    weight: 0.6,
                    mu: Grid::scalar(1.0),
                    sigma0: 0.1,
                },
            ],
            sched,
        );
        assert!(result.is_err());
    }
}
