//! Exponential-integrator update coefficients in `f64`.
//!
//! The reverse-time probability-flow ODE has a semi-linear structure: its
//! exact solution between two half-logSNR values `lambda_prev < lambda_next`
//! is a linear rescaling of the state plus an exponentially weighted
//! integral of the network prediction. With `h = lambda_next - lambda_prev`
//! the integral of a Taylor expansion of the prediction is available in
//! closed form, which gives the first- and second-order updates below.
//!
//! Two parameterizations are provided: noise prediction (`eps`) and data
//! prediction (`data`). The second-order single-step update estimates the
//! first derivative of the prediction from a midpoint evaluation and uses
//! the exact integral coefficients, so it is exact for predictions that are
//! linear in `lambda`. The multistep update extrapolates from the previous
//! data prediction instead of a midpoint model call.

use crate::schedule::NoiseSchedule;

/// Marginal quantities at one (possibly fractional) time point.
#[derive(Clone, Copy, Debug)]
pub struct StepPoint {
    pub t: f64,
    pub lambda: f64,
    /// `sqrt(alpha_bar)`
    pub alpha: f64,
    /// `sqrt(1 - alpha_bar)`
    pub sigma: f64,
}

impl StepPoint {
    pub fn at(schedule: &NoiseSchedule, t: f64) -> Self {
        let (alpha, sigma) = schedule.marginal_coeffs_at(t);
        StepPoint {
            t,
            lambda: schedule.lambda_at(t),
            alpha,
            sigma,
        }
    }
}

/// `x_next = keep * x + pred * model_term`
#[derive(Clone, Copy, Debug)]
pub struct FirstOrder {
    pub keep: f64,
    pub pred: f64,
}

/// `x_next = keep * x + pred_start * term_start + pred_mid * term_mid`
#[derive(Clone, Copy, Debug)]
pub struct SecondOrder {
    pub keep: f64,
    pub pred_start: f64,
    pub pred_mid: f64,
}

/// `x_next = keep * x + cur * x0_current + prev * x0_previous`
#[derive(Clone, Copy, Debug)]
pub struct Multistep {
    pub keep: f64,
    pub cur: f64,
    pub prev: f64,
}

fn h(prev: &StepPoint, next: &StepPoint) -> f64 {
    debug_assert!(
        next.lambda > prev.lambda,
        "reverse-time step must increase lambda: {} -> {}",
        prev.lambda,
        next.lambda
    );
    next.lambda - prev.lambda
}

/// Noise-prediction first order: `x (alpha_n/alpha_p) - sigma_n (e^h - 1) eps`.
pub fn first_order_eps(prev: &StepPoint, next: &StepPoint) -> FirstOrder {
    let h = h(prev, next);
    FirstOrder {
        keep: next.alpha / prev.alpha,
        pred: -next.sigma * h.exp_m1(),
    }
}

/// Data-prediction first order: `x (sigma_n/sigma_p) - alpha_n (e^{-h} - 1) x0`.
pub fn first_order_data(prev: &StepPoint, next: &StepPoint) -> FirstOrder {
    let h = h(prev, next);
    FirstOrder {
        keep: next.sigma / prev.sigma,
        pred: -next.alpha * (-h).exp_m1(),
    }
}

/// Noise-prediction second order with a midpoint-estimated derivative.
///
/// The exact solution for a prediction linear in `lambda` with slope `d` is
/// `keep x - sigma_n (e^h - 1) eps_start - sigma_n (e^h - 1 - h) d`; the
/// slope estimate `d = 2 (eps_mid - eps_start) / h` folds into the two
/// evaluation weights.
pub fn second_order_eps(prev: &StepPoint, next: &StepPoint) -> SecondOrder {
    let h = h(prev, next);
    let phi1 = h.exp_m1();
    let phi2 = phi1 - h; // e^h - 1 - h
    let slope_weight = next.sigma * phi2 * 2.0 / h;
    SecondOrder {
        keep: next.alpha / prev.alpha,
        pred_start: -next.sigma * phi1 + slope_weight,
        pred_mid: -slope_weight,
    }
}

/// Data-prediction second order with a midpoint-estimated derivative.
pub fn second_order_data(prev: &StepPoint, next: &StepPoint) -> SecondOrder {
    let h = h(prev, next);
    let phi1 = (-h).exp_m1(); // e^{-h} - 1
    let phi2 = phi1 + h; // e^{-h} - 1 + h
    let slope_weight = next.alpha * phi2 * 2.0 / h;
    SecondOrder {
        keep: next.sigma / prev.sigma,
        pred_start: -next.alpha * phi1 - slope_weight,
        pred_mid: slope_weight,
    }
}

/// Data-prediction multistep second order. `h_prev` is the previous
/// interval's `lambda` width; with `r = h_prev / h` the extrapolated
/// prediction `(1 + 1/(2r)) x0_cur - 1/(2r) x0_prev` replaces the midpoint
/// evaluation.
pub fn multistep_data(prev: &StepPoint, next: &StepPoint, h_prev: f64) -> Multistep {
    let h = h(prev, next);
    debug_assert!(h_prev > 0.0);
    let r = h_prev / h;
    let base = -next.alpha * (-h).exp_m1();
    let c = 1.0 / (2.0 * r);
    Multistep {
        keep: next.sigma / prev.sigma,
        cur: base * (1.0 + c),
        prev: -base * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points() -> (StepPoint, StepPoint) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        (StepPoint::at(&s, 800.0), StepPoint::at(&s, 600.0))
    }

    #[test]
    fn zero_prediction_leaves_pure_rescaling() {
        let (p, n) = points();
        let fo = first_order_eps(&p, &n);
        assert!((fo.keep - n.alpha / p.alpha).abs() < 1e-15);
        let fo_d = first_order_data(&p, &n);
        assert!((fo_d.keep - n.sigma / p.sigma).abs() < 1e-15);
    }

    #[test]
    fn second_order_weights_sum_to_first_order_weight() {
        // constant prediction: both evaluations equal, so the update must
        // collapse to first order
        let (p, n) = points();
        let so = second_order_eps(&p, &n);
        let fo = first_order_eps(&p, &n);
        assert!((so.pred_start + so.pred_mid - fo.pred).abs() < 1e-12 * fo.pred.abs());
        let so_d = second_order_data(&p, &n);
        let fo_d = first_order_data(&p, &n);
        assert!((so_d.pred_start + so_d.pred_mid - fo_d.pred).abs() < 1e-12 * fo_d.pred.abs());
    }

    #[test]
    fn multistep_collapses_for_constant_prediction() {
        // x0_prev == x0_cur: cur + prev must equal the first-order weight
        let (p, n) = points();
        let ms = multistep_data(&p, &n, 0.37);
        let fo = first_order_data(&p, &n);
        assert!((ms.cur + ms.prev - fo.pred).abs() < 1e-12 * fo.pred.abs());
    }

    #[test]
    fn exact_integral_identity_first_order_eps() {
        // closed form of the exponentially weighted integral against
        // Simpson quadrature: alpha_n * int e^{-lambda} d lambda over
        // [l_p, l_n] equals sigma_n (e^h - 1)
        let (p, n) = points();
        let exact = n.sigma * (n.lambda - p.lambda).exp_m1();
        let mut quad = 0.0f64;
        let m = 1024usize;
        let dl = (n.lambda - p.lambda) / m as f64;
        for i in 0..m {
            let a = p.lambda + i as f64 * dl;
            let b = a + dl;
            let mid = 0.5 * (a + b);
            quad += dl / 6.0 * ((-a).exp() + 4.0 * (-mid).exp() + (-b).exp());
        }
        quad *= n.alpha;
        assert!(
            (exact - quad).abs() < 1e-10 * exact.abs().max(1.0),
            "closed form {exact} vs quadrature {quad}"
        );
    }

    #[test]
    fn second_order_eps_is_exact_for_linear_integrand() {
        // prediction eps(lambda) = a + b (lambda - lambda_p); compare the
        // update against direct integration of the exact solution
        let (p, n) = points();
        let (a, b) = (0.7f64, -0.4f64);
        let hh = n.lambda - p.lambda;
        let x = 1.3f64;

        let so = second_order_eps(&p, &n);
        let eps_start = a;
        let eps_mid = a + b * hh / 2.0;
        let update = so.keep * x + so.pred_start * eps_start + so.pred_mid * eps_mid;

        // exact: keep x - alpha_n [a I0 + b I1], I0 = int e^{-l}, I1 = int e^{-l}(l - l_p)
        let i0 = (-p.lambda).exp() - (-n.lambda).exp();
        let i1 = (-p.lambda).exp() * (1.0 - (1.0 + hh) * (-hh).exp());
        let exact = so.keep * x - n.alpha * (a * i0 + b * i1);
        assert!(
            (update - exact).abs() < 1e-12,
            "update {update} vs exact {exact}"
        );
    }
}
