use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// beta linear from 1e-4 to 2e-2 over the step range.
    LinearBeta,
}

/// Tables for a T-step diffusion process, indexed by t in 1..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

pub fn build_schedule(total_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if total_steps < 1 {
        return Err(DiffusionError::BadSteps(total_steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(total_steps);
    let mut product = 1.0;
    for &a in &alphas {
        product *= a;
        alpha_bars.push(product);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.total_steps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                total: self.total_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha_bar at t-1, with the convention that alpha_bar(0) = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn checked_alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check(t)?;
        Ok(self.alpha_bar(t))
    }
}
