//! Discrete noise schedules and the half-logSNR reparameterization used by
//! the ODE samplers.
//!
//! For step `t` in `1..=T` the tables hold `beta_t`, `alpha_t = 1 - beta_t`,
//! `alpha_bar_t = prod alpha_i`, `sigma_t = sqrt(1 - alpha_bar_t)` and
//! `lambda_t = ln(sqrt(alpha_bar_t) / sqrt(1 - alpha_bar_t))`. `lambda` is
//! strictly decreasing in `t`, so it has an inverse; between grid points the
//! continuous extension interpolates `lambda` linearly and converts back,
//! which keeps `t_of_lambda` and the fractional-time coefficients mutually
//! consistent.
//!
//! A schedule is immutable after construction and freely shared across
//! threads.

use crate::error::{Error, Result};

/// How solver time points are distributed over `[1, T]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimeSpacing {
    /// Uniform in `t`.
    #[default]
    UniformT,
    /// Uniform in `lambda`, mapped back through the inverse.
    UniformLambda,
}

/// Compact description of a linear schedule; stored in checkpoints so
/// sampling can rebuild the exact training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_count, self.beta_start, self.beta_end)
    }
}

/// Precomputed forward-process tables for `T` discrete steps.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    lambdas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` inclusive.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f64> = if t_count == 1 {
            vec![beta_start]
        } else {
            (0..t_count)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas: Vec<f64> = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        let lambdas: Vec<f64> = alpha_bars
            .iter()
            .map(|ab| 0.5 * (ab / (1.0 - ab)).ln())
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            lambdas,
        })
    }

    /// Number of discrete steps `T`.
    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> usize {
        assert!(
            (1..=self.t_count()).contains(&t),
            "step {t} outside 1..={}",
            self.t_count()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.check_t(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.check_t(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.check_t(t)]
    }

    /// `sqrt(1 - alpha_bar_t)`, the marginal noise scale.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.check_t(t)]
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambdas[self.check_t(t)]
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        (self.lambdas[self.t_count() - 1], self.lambdas[0])
    }

    /// `lambda` at fractional step `t` in `[1, T]`, linear between grid points.
    pub fn lambda_at(&self, t: f64) -> f64 {
        assert!(
            t >= 1.0 && t <= self.t_count() as f64,
            "fractional step {t} outside [1, {}]",
            self.t_count()
        );
        let lo = t.floor() as usize;
        let hi = t.ceil() as usize;
        if lo == hi {
            return self.lambda(lo);
        }
        let w = t - lo as f64;
        self.lambda(lo) * (1.0 - w) + self.lambda(hi) * w
    }

    /// Marginal coefficients `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at a
    /// fractional step, derived from the interpolated `lambda` so they agree
    /// with `t_of_lambda`. Exact table values at integer steps.
    pub fn marginal_coeffs_at(&self, t: f64) -> (f64, f64) {
        if t.fract() == 0.0 {
            let ti = t as usize;
            return (self.alpha_bar(ti).sqrt(), self.sigma(ti));
        }
        let lambda = self.lambda_at(t);
        // alpha = 1/sqrt(1 + e^{-2 lambda}), sigma = 1/sqrt(1 + e^{2 lambda})
        let alpha = (1.0 + (-2.0 * lambda).exp()).sqrt().recip();
        let sigma = (1.0 + (2.0 * lambda).exp()).sqrt().recip();
        (alpha, sigma)
    }

    /// `alpha_bar` at a fractional step.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let (alpha, _) = self.marginal_coeffs_at(t);
        alpha * alpha
    }

    /// Monotone inverse of `lambda_at`: exact at grid points, linear between
    /// them. Errors when `lambda` lies outside `[lambda_T, lambda_1]`.
    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        let (lo, hi) = self.lambda_range();
        if !(lambda >= lo && lambda <= hi) {
            return Err(Error::invalid(format!(
                "lambda {lambda} outside schedule range [{lo}, {hi}]"
            )));
        }
        // lambdas are strictly decreasing in t; find the bracketing segment.
        let n = self.t_count();
        let mut left = 0usize; // index into lambdas, 0-based
        let mut right = n - 1;
        while right - left > 1 {
            let mid = (left + right) / 2;
            if self.lambdas[mid] >= lambda {
                left = mid;
            } else {
                right = mid;
            }
        }
        if lambda == self.lambdas[left] {
            return Ok((left + 1) as f64);
        }
        if lambda == self.lambdas[right] {
            return Ok((right + 1) as f64);
        }
        let l_lo = self.lambdas[left];
        let l_hi = self.lambdas[right];
        let w = (l_lo - lambda) / (l_lo - l_hi);
        Ok((left + 1) as f64 + w)
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`
    /// of the forward chain; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.check_t(t);
        if t == 1 {
            return 0.0;
        }
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Descending solver time points `t_N = T > ... > t_0 = 1`, `num_steps`
    /// intervals. The final point is the smallest discrete step; the last
    /// update is treated as noise-free by the samplers.
    pub fn solver_times(&self, num_steps: usize, spacing: TimeSpacing) -> Result<Vec<f64>> {
        let t_count = self.t_count();
        if num_steps == 0 || num_steps > t_count {
            return Err(Error::invalid(format!(
                "num_steps {num_steps} outside 1..={t_count}"
            )));
        }
        let t_max = t_count as f64;
        let t_min = 1.0;
        let times = match spacing {
            TimeSpacing::UniformT => (0..=num_steps)
                .map(|i| {
                    let frac = i as f64 / num_steps as f64;
                    t_max - (t_max - t_min) * frac
                })
                .collect::<Vec<f64>>(),
            TimeSpacing::UniformLambda => {
                let l_start = self.lambda(t_count);
                let l_end = self.lambda(1);
                let mut times = Vec::with_capacity(num_steps + 1);
                for i in 0..=num_steps {
                    let frac = i as f64 / num_steps as f64;
                    // clamp: rounding may overshoot the table range by an ulp
                    let lambda = (l_start + (l_end - l_start) * frac).clamp(l_start, l_end);
                    times.push(self.t_of_lambda(lambda)?);
                }
                // endpoints exact regardless of interpolation rounding
                times[0] = t_max;
                times[num_steps] = t_min;
                times
            }
        };
        Ok(times)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_ramp_hits_both_endpoints() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.1);
    }

    #[test]
    fn terminal_marginal_is_near_isotropic() {
        // direct product evaluation
        let s = default_schedule();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4, "alpha_bar_T = {}", s.alpha_bar(1000));
    }

    #[test]
    fn invalid_beta_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.4).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn lambda_definition_holds_at_every_index() {
        let s = default_schedule();
        for t in 1..=1000 {
            let expected = 0.5 * (s.alpha_bar(t) / (1.0 - s.alpha_bar(t))).ln();
            assert!((s.lambda(t) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_preserving_identity() {
        let s = default_schedule();
        for t in 1..=1000 {
            let a = s.alpha_bar(t).sqrt();
            let sg = s.sigma(t);
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn monotonicity_invariants() {
        let s = default_schedule();
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.lambda(t) < s.lambda(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }

    #[test]
    fn t_of_lambda_inverts_grid_points_exactly() {
        let s = default_schedule();
        for t in [1usize, 2, 17, 500, 999, 1000] {
            assert_eq!(s.t_of_lambda(s.lambda(t)).unwrap(), t as f64);
        }
    }

    #[test]
    fn lambda_zero_where_alpha_bar_is_half() {
        // alpha_bar = 0.5 => lambda = 0; find it by inversion
        let s = default_schedule();
        let (lo, hi) = s.lambda_range();
        assert!(lo < 0.0 && hi > 0.0);
        let t = s.t_of_lambda(0.0).unwrap();
        let ab = s.alpha_bar_at(t);
        assert!((ab - 0.5).abs() < 1e-3, "alpha_bar at lambda=0: {ab}");
    }

    #[test]
    fn round_trip_lambda_t_lambda() {
        use rand::{Rng, SeedableRng};
        let s = default_schedule();
        let (lo, hi) = s.lambda_range();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let lambda = rng.gen_range(lo..hi);
            let t = s.t_of_lambda(lambda).unwrap();
            let back = s.lambda_at(t);
            assert!((back - lambda).abs() < 1e-9, "lambda {lambda} -> t {t} -> {back}");
        }
    }

    #[test]
    fn t_of_lambda_rejects_out_of_range() {
        let s = default_schedule();
        let (lo, hi) = s.lambda_range();
        assert!(s.t_of_lambda(lo - 1.0).is_err());
        assert!(s.t_of_lambda(hi + 1.0).is_err());
    }

    #[test]
    fn solver_times_paper_defaults() {
        let s = default_schedule();
        let times = s.solver_times(20, TimeSpacing::UniformT).unwrap();
        assert_eq!(times.len(), 21);
        assert_eq!(times[0], 1000.0);
        assert_eq!(times[20], 1.0);
        // spacing uniform: all interval widths equal within rounding
        let d0 = times[0] - times[1];
        for w in times.windows(2) {
            assert!(((w[0] - w[1]) - d0).abs() <= 1.0);
        }
    }

    #[test]
    fn solver_times_full_grid_visits_every_step() {
        let s = NoiseSchedule::linear(64, 1e-4, 0.02).unwrap();
        let times = s.solver_times(64, TimeSpacing::UniformT).unwrap();
        assert_eq!(times.len(), 65);
        // with num_steps = T the grid walks essentially every discrete step:
        // every interval is below one step wide and every integer in [1, T]
        // is within half a step of some time point
        for w in times.windows(2) {
            assert!(w[0] - w[1] <= 1.0);
        }
        for t in 1..=64usize {
            let nearest = times
                .iter()
                .map(|x| (x - t as f64).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 0.5, "step {t} missed by {nearest}");
        }
    }

    #[test]
    fn solver_times_reject_too_many_steps() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.solver_times(11, TimeSpacing::UniformT).is_err());
        assert!(s.solver_times(0, TimeSpacing::UniformT).is_err());
    }

    #[test]
    fn solver_times_uniform_lambda_is_monotone() {
        let s = default_schedule();
        let times = s.solver_times(20, TimeSpacing::UniformLambda).unwrap();
        assert_eq!(times.len(), 21);
        assert_eq!(times[0], 1000.0);
        assert_eq!(times[20], 1.0);
        for w in times.windows(2) {
            assert!(w[0] > w[1], "times must strictly decrease: {w:?}");
        }
    }

    #[test]
    fn posterior_variance_matches_direct_formula() {
        let s = default_schedule();
        let t = 2;
        let expected = s.beta(2) * (1.0 - s.alpha_bar(1)) / (1.0 - s.alpha_bar(2));
        assert_eq!(s.posterior_variance(t), expected);
        assert_eq!(s.posterior_variance(1), 0.0);
    }
}
