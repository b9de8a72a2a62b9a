use crate::error::{Error, Result};

/// Default floor for reverse-step standard deviations; keeps the final
/// transition's density finite.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;

/// Noise schedule over `T` steps, indexed by step `s` in `0..T` where step
/// `s` maps `x_{s+1}` to `x_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Reverse-step standard deviations (posterior variant, floored).
    pub sigmas: Vec<f64>,
    /// Timestep index fed to the network for each step. Equal to `s` for a
    /// base schedule; points into the base schedule after respacing.
    pub model_steps: Vec<usize>,
    pub sigma_min: f64,
}

impl Schedule {
    /// Linear beta schedule.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let betas = (0..steps)
            .map(|s| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, (0..steps).collect(), DEFAULT_SIGMA_MIN)
    }

    fn from_betas(betas: Vec<f64>, model_steps: Vec<usize>, sigma_min: f64) -> Result<Self> {
        if !(sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|s| {
                let prev = if s == 0 { 1.0 } else { alpha_bars[s - 1] };
                let var = betas[s] * (1.0 - prev) / (1.0 - alpha_bars[s]);
                var.sqrt().max(sigma_min)
            })
            .collect();
        let sched = Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            model_steps,
            sigma_min,
        };
        sched.check()?;
        Ok(sched)
    }

    fn check(&self) -> Result<()> {
        if self.betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bars must strictly decrease".into()));
        }
        Ok(())
    }

    pub fn with_sigma_min(&self, sigma_min: f64) -> Result<Self> {
        Self::from_betas(self.betas.clone(), self.model_steps.clone(), sigma_min)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// A shorter schedule visiting `steps` evenly spaced timesteps of this one
    /// (always including the first and last). Betas are re-derived so that the
    /// cumulative products match at the retained timesteps.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::Config(format!(
                "cannot respace {n} steps to {steps}"
            )));
        }
        if steps == n {
            return Ok(self.clone());
        }
        let picks: Vec<usize> = if steps == 1 {
            vec![n - 1]
        } else {
            (0..steps)
                .map(|k| ((k * (n - 1)) as f64 / (steps - 1) as f64).round() as usize)
                .collect()
        };
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &p in &picks {
            let ab = self.alpha_bars[p];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_steps = picks.iter().map(|&p| self.model_steps[p]).collect();
        Self::from_betas(betas, model_steps, self.sigma_min)
    }

    pub fn check_step(&self, s: usize) -> Result<()> {
        if s >= self.len() {
            Err(Error::Index(format!("step {s} of a {}-step schedule", self.len())))
        } else {
            Ok(())
        }
    }

    /// Coefficients `(shift_scale, eps_scale)` of the posterior mean
    /// `mu = shift_scale * x + eps_scale * eps_hat` at step `s`.
    pub fn mean_coefficients(&self, s: usize) -> (f64, f64) {
        let inv_sqrt_alpha = 1.0 / self.alphas[s].sqrt();
        let eps_scale = -inv_sqrt_alpha * self.betas[s] / (1.0 - self.alpha_bars[s]).sqrt();
        (inv_sqrt_alpha, eps_scale)
    }
}
