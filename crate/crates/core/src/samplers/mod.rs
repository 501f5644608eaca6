//! Reverse-time generators: stochastic ancestral chain, first-order
//! exponential integrator, and second-order single-step (midpoint) and
//! multistep updates, with classifier-free guidance and thresholding.

pub mod coeffs;
pub mod scalar;

use rayon::prelude::*;

use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::schedule::{NoiseSchedule, TimeSpacing};
use crate::train;
use coeffs::StepPoint;

/// Reverse-time generation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Stochastic full-length chain; ignores `num_steps`.
    Ancestral,
    FirstOrder,
    /// Second-order single-step (midpoint evaluation).
    Dpm2s,
    /// Second-order multistep (history extrapolation).
    Dpm2m,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ancestral" => Ok(Method::Ancestral),
            "first_order" => Ok(Method::FirstOrder),
            "dpm2s" => Ok(Method::Dpm2s),
            "dpm2m" => Ok(Method::Dpm2m),
            other => Err(Error::invalid(format!(
                "unknown method '{other}' (ancestral | first_order | dpm2s | dpm2m)"
            ))),
        }
    }
}

/// Which quantity the integrator treats as the model output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Prediction {
    Epsilon,
    #[default]
    Data,
}

impl std::str::FromStr for Prediction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" => Ok(Prediction::Epsilon),
            "data" => Ok(Prediction::Data),
            other => Err(Error::invalid(format!(
                "unknown prediction form '{other}' (epsilon | data)"
            ))),
        }
    }
}

/// Clamping policy applied to predicted clean samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Thresholding {
    #[default]
    None,
    /// Clip to `[-bound, bound]`.
    Static { bound: f32 },
    /// Clip to the given percentile of `|x0|` and rescale when it exceeds 1.
    Dynamic { percentile: f64 },
}

impl std::str::FromStr for Thresholding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "none" {
            return Ok(Thresholding::None);
        }
        if let Some(rest) = lower.strip_prefix("static") {
            let bound = rest
                .trim_start_matches(':')
                .parse::<f32>()
                .unwrap_or(1.0);
            return Ok(Thresholding::Static { bound });
        }
        if let Some(rest) = lower.strip_prefix("dynamic") {
            let percentile = rest
                .trim_start_matches(':')
                .parse::<f64>()
                .unwrap_or(0.995);
            return Ok(Thresholding::Dynamic { percentile });
        }
        Err(Error::invalid(format!(
            "unknown thresholding '{s}' (none | static[:bound] | dynamic[:percentile])"
        )))
    }
}

/// Variance of the stochastic reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AncestralVariance {
    /// Forward-posterior variance `beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    #[default]
    Posterior,
    /// Plain `beta_t`.
    Beta,
}

/// Full sampler configuration.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub method: Method,
    pub num_steps: usize,
    /// Guidance weight `w >= -1`; 0 disables the unconditional evaluation.
    pub guidance_scale: f64,
    pub thresholding: Thresholding,
    pub prediction: Prediction,
    pub ancestral_variance: AncestralVariance,
    pub time_spacing: TimeSpacing,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dpm2m,
            num_steps: 20,
            guidance_scale: 0.0,
            thresholding: Thresholding::None,
            prediction: Prediction::Data,
            ancestral_variance: AncestralVariance::Posterior,
            time_spacing: TimeSpacing::UniformT,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        if self.guidance_scale < -1.0 {
            return Err(Error::invalid(format!(
                "guidance scale {} must be >= -1",
                self.guidance_scale
            )));
        }
        match self.thresholding {
            Thresholding::Static { bound } if bound <= 0.0 => {
                Err(Error::invalid(format!("static bound {bound} must be > 0")))
            }
            Thresholding::Dynamic { percentile } if !(percentile > 0.0 && percentile <= 1.0) => {
                Err(Error::invalid(format!(
                    "dynamic percentile {percentile} outside (0, 1]"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Guidance-combined prediction:
/// `(w + 1) eps(x, t, label) - w eps(x, t)`.
///
/// `w = 0` skips the unconditional evaluation, `w = -1` skips the
/// conditional one, and an absent label always means a single unconditional
/// call.
pub fn guided_eps(
    model: &dyn EpsilonModel,
    x: &Grid,
    t: f64,
    label: Option<usize>,
    w: f64,
) -> Result<Grid> {
    let Some(class) = label else {
        return model.predict(x, t, None);
    };
    if w == 0.0 {
        return model.predict(x, t, Some(class));
    }
    if w == -1.0 {
        return model.predict(x, t, None);
    }
    let cond = model.predict(x, t, Some(class))?;
    let uncond = model.predict(x, t, None)?;
    cond.zip_map(&uncond, "guided_eps", |c, u| {
        ((w + 1.0) * c as f64 - w * u as f64) as f32
    })
}

/// Linear-interpolated percentile of `|values|`; `q` in (0, 1].
pub fn percentile_abs(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (mags.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        mags[lo]
    } else {
        let w = (pos - lo as f64) as f32;
        mags[lo] * (1.0 - w) + mags[hi] * w
    }
}

/// Apply a thresholding policy to a predicted clean sample.
pub fn apply_thresholding(x0: Grid, mode: Thresholding) -> Grid {
    match mode {
        Thresholding::None => x0,
        Thresholding::Static { bound } => x0.map(|v| v.clamp(-bound, bound)),
        Thresholding::Dynamic { percentile } => {
            let s = percentile_abs(x0.data(), percentile);
            if s > 1.0 {
                x0.map(|v| v.clamp(-s, s) / s)
            } else {
                x0
            }
        }
    }
}

/// Invert the forward marginal at `t` and threshold the result:
/// `x0 = (x_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)`.
pub fn eps_to_x0(
    x_t: &Grid,
    eps_hat: &Grid,
    t: f64,
    schedule: &NoiseSchedule,
    thresholding: Thresholding,
) -> Result<Grid> {
    let (a, s) = schedule.marginal_coeffs_at(t);
    if a == 0.0 {
        return Err(Error::invalid("alpha_bar is zero; cannot invert"));
    }
    let x0 = x_t.zip_map(eps_hat, "eps_to_x0", |x, e| {
        ((x as f64 - s * e as f64) / a) as f32
    })?;
    Ok(apply_thresholding(x0, thresholding))
}

/// Rolling state for the multistep update: the previous data prediction and
/// the `lambda` at which it was made.
#[derive(Default)]
pub struct Dpm2mHistory {
    prev: Option<(f64, Grid)>,
}

impl Dpm2mHistory {
    pub fn new() -> Self {
        Self::default()
    }
}

fn axpy2(keep: f64, x: &Grid, c1: f64, g1: &Grid) -> Grid {
    let data = x
        .data()
        .iter()
        .zip(g1.data())
        .map(|(&a, &b)| (keep * a as f64 + c1 * b as f64) as f32)
        .collect();
    Grid::new(x.shape().to_vec(), data).expect("same shape")
}

fn axpy3(keep: f64, x: &Grid, c1: f64, g1: &Grid, c2: f64, g2: &Grid) -> Grid {
    let data = x
        .data()
        .iter()
        .zip(g1.data().iter().zip(g2.data()))
        .map(|(&a, (&b, &c))| (keep * a as f64 + c1 * b as f64 + c2 * c as f64) as f32)
        .collect();
    Grid::new(x.shape().to_vec(), data).expect("same shape")
}

/// Reverse-time generator binding a model, schedule, and configuration.
pub struct Sampler<'a> {
    model: &'a dyn EpsilonModel,
    schedule: &'a NoiseSchedule,
    config: SolverConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        model: &'a dyn EpsilonModel,
        schedule: &'a NoiseSchedule,
        config: SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !matches!(config.method, Method::Ancestral) && config.num_steps > schedule.t_count() {
            return Err(Error::invalid(format!(
                "num_steps {} exceeds schedule length {}",
                config.num_steps,
                schedule.t_count()
            )));
        }
        Ok(Sampler {
            model,
            schedule,
            config,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn guided(&self, x: &Grid, t: f64, label: Option<usize>) -> Result<Grid> {
        guided_eps(self.model, x, t, label, self.config.guidance_scale)
    }

    /// One stochastic reverse step `t -> t-1`; the final step returns the
    /// mean without noise.
    pub fn ancestral_step(
        &self,
        x: &Grid,
        t: usize,
        label: Option<usize>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Grid> {
        if t == 0 || t > self.schedule.t_count() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.schedule.t_count()
            )));
        }
        let eps = self.guided(x, t as f64, label)?;
        let beta = self.schedule.beta(t);
        let sigma = self.schedule.sigma(t);
        let inv_sqrt_alpha = self.schedule.alpha(t).sqrt().recip();
        let mean = x.zip_map(&eps, "ancestral_step", |xv, ev| {
            (inv_sqrt_alpha * (xv as f64 - beta / sigma * ev as f64)) as f32
        })?;
        if t == 1 {
            return Ok(mean);
        }
        let var = match self.config.ancestral_variance {
            AncestralVariance::Posterior => self.schedule.posterior_variance(t),
            AncestralVariance::Beta => beta,
        };
        let std = var.sqrt();
        let noise = Grid::standard_normal(mean.shape(), rng);
        mean.zip_map(&noise, "ancestral_step noise", |m, z| {
            (m as f64 + std * z as f64) as f32
        })
    }

    /// First-order exponential-integrator step between two (possibly
    /// fractional) times, `t_prev > t_next`.
    pub fn first_order_step(
        &self,
        x: &Grid,
        t_prev: f64,
        t_next: f64,
        label: Option<usize>,
    ) -> Result<Grid> {
        let prev = StepPoint::at(self.schedule, t_prev);
        let next = StepPoint::at(self.schedule, t_next);
        let eps = self.guided(x, t_prev, label)?;
        Ok(match self.config.prediction {
            Prediction::Epsilon => {
                let c = coeffs::first_order_eps(&prev, &next);
                axpy2(c.keep, x, c.pred, &eps)
            }
            Prediction::Data => {
                let x0 = eps_to_x0(x, &eps, t_prev, self.schedule, self.config.thresholding)?;
                let c = coeffs::first_order_data(&prev, &next);
                axpy2(c.keep, x, c.pred, &x0)
            }
        })
    }

    /// Second-order single step: evaluate at `t_prev`, take a first-order
    /// half-step to the `lambda` midpoint, evaluate there, then apply the
    /// second-order update with the midpoint evaluation supplying the
    /// derivative estimate.
    pub fn dpm2s_step(
        &self,
        x: &Grid,
        t_prev: f64,
        t_next: f64,
        label: Option<usize>,
    ) -> Result<Grid> {
        let prev = StepPoint::at(self.schedule, t_prev);
        let next = StepPoint::at(self.schedule, t_next);
        let lambda_mid = 0.5 * (prev.lambda + next.lambda);
        let t_mid = self.schedule.t_of_lambda(lambda_mid)?;
        let mid = StepPoint::at(self.schedule, t_mid);
        let eps_start = self.guided(x, t_prev, label)?;
        match self.config.prediction {
            Prediction::Epsilon => {
                let c_half = coeffs::first_order_eps(&prev, &mid);
                let u = axpy2(c_half.keep, x, c_half.pred, &eps_start);
                let eps_mid = self.guided(&u, t_mid, label)?;
                let c = coeffs::second_order_eps(&prev, &next);
                Ok(axpy3(c.keep, x, c.pred_start, &eps_start, c.pred_mid, &eps_mid))
            }
            Prediction::Data => {
                let x0_start =
                    eps_to_x0(x, &eps_start, t_prev, self.schedule, self.config.thresholding)?;
                let c_half = coeffs::first_order_data(&prev, &mid);
                let u = axpy2(c_half.keep, x, c_half.pred, &x0_start);
                let eps_mid = self.guided(&u, t_mid, label)?;
                let x0_mid =
                    eps_to_x0(&u, &eps_mid, t_mid, self.schedule, self.config.thresholding)?;
                let c = coeffs::second_order_data(&prev, &next);
                Ok(axpy3(c.keep, x, c.pred_start, &x0_start, c.pred_mid, &x0_mid))
            }
        }
    }

    /// Second-order multistep update in data prediction. Falls back to first
    /// order when `history` is empty; updates `history` in place.
    pub fn dpm2m_step(
        &self,
        x: &Grid,
        t_prev: f64,
        t_next: f64,
        label: Option<usize>,
        history: &mut Dpm2mHistory,
    ) -> Result<Grid> {
        let prev = StepPoint::at(self.schedule, t_prev);
        let next = StepPoint::at(self.schedule, t_next);
        let eps = self.guided(x, t_prev, label)?;
        let x0 = eps_to_x0(x, &eps, t_prev, self.schedule, self.config.thresholding)?;
        let out = match &history.prev {
            Some((lambda_pp, x0_prev)) => {
                let c = coeffs::multistep_data(&prev, &next, prev.lambda - lambda_pp);
                axpy3(c.keep, x, c.cur, &x0, c.prev, x0_prev)
            }
            None => {
                let c = coeffs::first_order_data(&prev, &next);
                axpy2(c.keep, x, c.pred, &x0)
            }
        };
        history.prev = Some((prev.lambda, x0));
        Ok(out)
    }

    /// Integrate one trajectory from `x_init` at `t = T` to the final time.
    /// The last interval of the second-order methods runs first order in the
    /// data parameterization they share.
    pub fn run_trajectory(
        &self,
        x_init: Grid,
        label: Option<usize>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Grid> {
        let mut x = x_init;
        match self.config.method {
            Method::Ancestral => {
                for t in (1..=self.schedule.t_count()).rev() {
                    x = self.ancestral_step(&x, t, label, rng)?;
                }
            }
            method => {
                let times = self
                    .schedule
                    .solver_times(self.config.num_steps, self.config.time_spacing)?;
                let mut history = Dpm2mHistory::new();
                for i in 0..self.config.num_steps {
                    let (tp, tn) = (times[i], times[i + 1]);
                    let last = i + 1 == self.config.num_steps;
                    x = match method {
                        Method::FirstOrder => self.first_order_step(&x, tp, tn, label)?,
                        Method::Dpm2s => {
                            if last {
                                self.first_order_step(&x, tp, tn, label)?
                            } else {
                                self.dpm2s_step(&x, tp, tn, label)?
                            }
                        }
                        Method::Dpm2m => {
                            if last {
                                history.prev = None;
                            }
                            self.dpm2m_step(&x, tp, tn, label, &mut history)?
                        }
                        Method::Ancestral => unreachable!(),
                    };
                }
            }
        }
        x.check_finite("sampled trajectory")?;
        Ok(x)
    }

    /// Generate `n` independent samples of the given shape. Trajectory `i`
    /// draws from the stream derived from `(seed, i)`, so results are
    /// deterministic and order-stable regardless of worker count.
    pub fn sample(&self, shape: &[usize], n: usize, label: Option<usize>) -> Result<Vec<Grid>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = train::derive_rng(self.config.seed, 0x5452_414a, i as u64);
                let x_init = Grid::standard_normal(shape, &mut rng);
                self.run_trajectory(x_init, label, &mut rng)
            })
            .collect()
    }
}
