//! Forward diffusion process, training objectives, variational diagnostics,
//! and the conditional training loop with label dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoisers::{analytic_gaussian_eps, AnalyticGaussianModel, CondNetLite, EpsilonModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Grid, NodeId, Tape};
use crate::schedule::NoiseSchedule;
use crate::train;

/// One training example: a spectrogram grid with its class and fold.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub spectrogram: Grid,
    pub class_id: usize,
    pub fold: u32,
}

/// Training-loop settings. `label_dropout` is the probability of replacing a
/// sample's class with the null label, which trains the unconditional branch
/// of the same network.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_dropout: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 16,
            label_dropout: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::invalid(format!(
                "label_dropout {} outside [0, 1]",
                self.label_dropout
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default)]
pub struct LossTrace {
    pub per_epoch: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (epoch, loss) in self.per_epoch.iter().enumerate() {
            out.push_str(&format!("{epoch},{loss}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Diffuse `x0` to step `t` with the given noise draw:
/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Grid, t: usize, eps: &Grid, schedule: &NoiseSchedule) -> Result<Grid> {
    if t == 0 || t > schedule.t_count() {
        return Err(Error::invalid(format!(
            "step {t} outside 1..={}",
            schedule.t_count()
        )));
    }
    let a = schedule.alpha_bar(t).sqrt();
    let s = schedule.sigma(t);
    x0.zip_map(eps, "q_sample", |x, e| (a * x as f64 + s * e as f64) as f32)
}

/// Mean and variance of the forward-chain posterior `q(x_{t-1} | x_t, x0)`.
/// Defined for `t >= 2`; at `t = 1` the posterior targets `x0` directly.
pub fn posterior_params(
    x0: &Grid,
    x_t: &Grid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Grid, f64)> {
    if t < 2 || t > schedule.t_count() {
        return Err(Error::invalid(format!(
            "posterior_params requires 2 <= t <= {}, got {t}",
            schedule.t_count()
        )));
    }
    x0.require_same_shape(x_t, "posterior_params")?;
    let beta = schedule.beta(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let alpha = schedule.alpha(t);
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = x0.zip_map(x_t, "posterior_params", |x, xt| {
        (coef_x0 * x as f64 + coef_xt * xt as f64) as f32
    })?;
    Ok((mean, schedule.posterior_variance(t)))
}

/// Unweighted noise-prediction objective: mean squared error between the
/// drawn noise and the model's prediction at `q_sample(x0, t, eps)`.
pub fn simple_loss(
    model: &dyn EpsilonModel,
    x0: &Grid,
    label: Option<usize>,
    t: usize,
    eps: &Grid,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, schedule)?;
    let pred = model.predict(&x_t, t as f64, label)?;
    pred.require_same_shape(eps, "simple_loss")?;
    let acc: f64 = eps
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&e, &p)| {
            let d = e as f64 - p as f64;
            d * d
        })
        .sum();
    Ok(acc / eps.len() as f64)
}

/// Variance-weighted form of the same objective:
/// `beta_t^2 / (2 alpha_t (1 - alpha_bar_t) reverse_variance)` times the
/// summed squared prediction error. Equals [`simple_loss`] scaled by that
/// coefficient and the element count.
pub fn weighted_loss_term(
    model: &dyn EpsilonModel,
    x0: &Grid,
    eps: &Grid,
    t: usize,
    schedule: &NoiseSchedule,
    reverse_variance: f64,
) -> Result<f64> {
    if reverse_variance <= 0.0 {
        return Err(Error::invalid(format!(
            "reverse_variance {reverse_variance} must be > 0"
        )));
    }
    let simple = simple_loss(model, x0, None, t, eps, schedule)?;
    let coefficient = eq7_coefficient(t, schedule, reverse_variance);
    Ok(coefficient * simple * eps.len() as f64)
}

/// Weight multiplying the summed squared error in the variance-weighted
/// objective.
pub fn eq7_coefficient(t: usize, schedule: &NoiseSchedule, reverse_variance: f64) -> f64 {
    let beta = schedule.beta(t);
    beta * beta / (2.0 * schedule.alpha(t) * (1.0 - schedule.alpha_bar(t)) * reverse_variance)
}

/// Gaussian data distribution `N(mu, sigma0^2 I)` for the variational
/// diagnostics; non-Gaussian data has no closed-form KL and is unsupported.
#[derive(Clone, Debug)]
pub struct GaussianData {
    pub mu: Grid,
    pub sigma0: f64,
}

/// Variational-bound diagnostics. `kl[i]` is the term for step `t = i + 2`;
/// `prior_kl` compares the terminal marginal against the standard normal;
/// `reconstruction` is the expected negative log-density of `x0` under the
/// final reverse step (continuous density, no discretized decoder).
#[derive(Clone, Debug)]
pub struct VlbTerms {
    pub prior_kl: f64,
    pub kl: Vec<f64>,
    pub reconstruction: f64,
}

impl VlbTerms {
    /// Total bound value: prior + sum of per-step KLs + reconstruction.
    pub fn total(&self) -> f64 {
        self.prior_kl + self.kl.iter().sum::<f64>() + self.reconstruction
    }
}

/// Monte-Carlo estimate of every variational term for Gaussian data under
/// the closed-form denoiser. The reverse variance is matched to the forward
/// posterior for `t >= 2`; the final step uses `beta_1`.
pub fn vlb_terms(
    model: &AnalyticGaussianModel,
    data: &GaussianData,
    schedule: &NoiseSchedule,
    num_mc: usize,
    seed: u64,
) -> Result<VlbTerms> {
    if num_mc == 0 {
        return Err(Error::invalid("num_mc must be >= 1"));
    }
    data.mu.require_same_shape(model.mu(), "vlb_terms")?;
    if data.sigma0 < 0.0 {
        return Err(Error::invalid("sigma0 must be >= 0"));
    }
    let t_count = schedule.t_count();
    let dim = data.mu.len() as f64;
    let mut rng = train::derive_rng(seed, 0x56_4c_42, 0);

    let draw_x0 = |rng: &mut ChaCha8Rng| -> Grid {
        let noise = Grid::standard_normal(data.mu.shape(), rng);
        data.mu
            .zip_map(&noise, "draw_x0", |m, z| m + (data.sigma0 as f32) * z)
            .expect("same shape")
    };

    // prior term: KL( N(a_T x0, s_T^2 I) || N(0, I) ), averaged over x0
    let ab_t = schedule.alpha_bar(t_count);
    let s2 = 1.0 - ab_t;
    let mut prior_kl = 0.0f64;
    for _ in 0..num_mc {
        let x0 = draw_x0(&mut rng);
        let sq_mean: f64 = x0.data().iter().map(|&v| ab_t * (v as f64) * (v as f64)).sum();
        prior_kl += 0.5 * (dim * s2 + sq_mean - dim - dim * s2.ln());
    }
    prior_kl /= num_mc as f64;

    // per-step terms: KL( q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t) ) with
    // matched variances, so only the mean gap contributes
    let mut kl = Vec::with_capacity(t_count - 1);
    for t in 2..=t_count {
        let var = schedule.posterior_variance(t);
        let mut acc = 0.0f64;
        for _ in 0..num_mc {
            let x0 = draw_x0(&mut rng);
            let eps = Grid::standard_normal(x0.shape(), &mut rng);
            let x_t = q_sample(&x0, t, &eps, schedule)?;
            let (mean_q, _) = posterior_params(&x0, &x_t, t, schedule)?;
            let mean_p = reverse_mean(model, &x_t, t, schedule)?;
            let gap: f64 = mean_q
                .data()
                .iter()
                .zip(mean_p.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            acc += gap / (2.0 * var);
        }
        kl.push(acc / num_mc as f64);
    }

    // reconstruction term at t = 1 with variance beta_1
    let var1 = schedule.beta(1);
    let mut recon = 0.0f64;
    for _ in 0..num_mc {
        let x0 = draw_x0(&mut rng);
        let eps = Grid::standard_normal(x0.shape(), &mut rng);
        let x1 = q_sample(&x0, 1, &eps, schedule)?;
        let mean_p = reverse_mean(model, &x1, 1, schedule)?;
        let gap: f64 = x0
            .data()
            .iter()
            .zip(mean_p.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        recon += gap / (2.0 * var1) + 0.5 * dim * (2.0 * std::f64::consts::PI * var1).ln();
    }
    recon /= num_mc as f64;

    Ok(VlbTerms {
        prior_kl,
        kl,
        reconstruction: recon,
    })
}

/// Reverse-step mean from a noise prediction:
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
fn reverse_mean(
    model: &AnalyticGaussianModel,
    x_t: &Grid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Grid> {
    let eps_hat = analytic_gaussian_eps(model.mu(), model.sigma0(), x_t, t as f64, schedule)?;
    let beta = schedule.beta(t);
    let s = schedule.sigma(t);
    let inv_sqrt_alpha = schedule.alpha(t).sqrt().recip();
    x_t.zip_map(&eps_hat, "reverse_mean", |x, e| {
        (inv_sqrt_alpha * (x as f64 - beta / s * e as f64)) as f32
    })
}

/// Train the conditional denoiser on labeled spectrograms. Per sample and
/// epoch: a uniform step draw, a fresh noise draw, and a Bernoulli label
/// dropout decision, all derived from `(seed, epoch, index)`. Returns the
/// per-epoch mean loss trace.
pub fn fit(
    model: &mut CondNetLite,
    dataset: &[LabeledSample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<LossTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let net_config = model.config().clone();
    for (i, sample) in dataset.iter().enumerate() {
        if sample.class_id >= net_config.num_classes {
            return Err(Error::invalid(format!(
                "sample {i}: class {} out of range for {} classes",
                sample.class_id, net_config.num_classes
            )));
        }
        sample.spectrogram.check_finite("fit dataset")?;
    }
    let t_count = schedule.t_count();
    let label_dropout = config.label_dropout;
    let sched = schedule.clone();
    let builder = move |tape: &mut Tape, ids: &[NodeId], idx: usize, rng: &mut ChaCha8Rng| {
        let sample = &dataset[idx];
        let t = rng.gen_range(1..=t_count);
        let shape = sample.spectrogram.shape().to_vec();
        let eps = Grid::standard_normal(&shape, rng);
        let x_t = q_sample(&sample.spectrogram, t, &eps, &sched)?;
        let label = if rng.gen_bool(label_dropout) {
            None
        } else {
            Some(sample.class_id)
        };
        let pred = CondNetLite::build_eps_graph(&net_config, tape, ids, &x_t, t as f64, label)?;
        let target_shape = tape.value(pred).shape().to_vec();
        let target = tape.constant(eps.reshaped(&target_shape)?);
        tape.mse(pred, target)
    };

    let mut params = model.take_params();
    let result = train::run_epochs(
        &mut params,
        dataset.len(),
        config.epochs,
        config.batch_size,
        config.optimizer,
        config.seed,
        &builder,
    );
    model.set_params(params)?;
    Ok(LossTrace {
        per_epoch: result?,
    })
}
