//! Forward corruption processes: discrete-time Gaussian diffusion with a
//! linear β table, and straight-line rectified flow.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Diffusion,
    Flow,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Diffusion => "diffusion",
            ScheduleKind::Flow => "flow",
        }
    }
}

/// Serializable schedule parameters; [`ScheduleConfig::build`] produces the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Diffusion,
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.train_steps, self.beta_min, self.beta_max)
    }
}

/// A point on the corruption path: integer step for diffusion, `[0, 1]` for flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Time {
    Step(usize),
    Flow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: Time,
}

/// Immutable noise schedule. Diffusion schedules carry `betas[t-1]` and
/// `alpha_bars[t-1]` for `t = 1..=train_steps`; flow schedules carry neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub train_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_min` to `beta_max` over `train_steps`.
    /// Flow schedules ignore the β bounds.
    pub fn new(kind: ScheduleKind, train_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::InvalidSchedule("train_steps must be >= 1".into()));
        }
        if kind == ScheduleKind::Flow {
            return Ok(Self {
                kind,
                train_steps,
                betas: Vec::new(),
                alpha_bars: Vec::new(),
            });
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| {
                if train_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(train_steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self {
            kind,
            train_steps,
            betas,
            alpha_bars,
        })
    }

    /// Flow schedule; `train_steps` is kept only as the count used to scale
    /// the preference losses.
    pub fn flow(train_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Flow, train_steps, 0.0, 0.0)
    }

    pub fn is_diffusion(&self) -> bool {
        self.kind == ScheduleKind::Diffusion
    }

    /// ᾱ_t for `t` in `0..=train_steps`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_time(&self, t: Time) -> Result<()> {
        match (self.kind, t) {
            (ScheduleKind::Diffusion, Time::Step(s)) => {
                if s == 0 || s > self.train_steps {
                    return Err(Error::TimeOutOfRange {
                        value: s as f64,
                        min: 1.0,
                        max: self.train_steps as f64,
                    });
                }
                Ok(())
            }
            (ScheduleKind::Flow, Time::Flow(x)) => check_unit_time(x),
            (kind, _) => Err(Error::InvalidSchedule(format!(
                "time variant does not match {} schedule",
                kind.name()
            ))),
        }
    }

    /// Time fed to the network, in `[0, 1]` for both kinds.
    pub fn network_time(&self, t: Time) -> f64 {
        match t {
            Time::Step(s) => s as f64 / self.train_steps as f64,
            Time::Flow(x) => x,
        }
    }

    /// Corrupts `z0` to time `t` with the caller's noise.
    pub fn corrupt(&self, z0: &[f64], t: Time, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        match t {
            Time::Step(s) => Ok(diffuse_forward(z0, s, eps, self)?.z),
            Time::Flow(x) => Ok(flow_forward(z0, x, eps)?.z),
        }
    }

    /// Regression target at `z_t`: the noise for diffusion, `eps - z0` for flow.
    pub fn target(&self, z0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            ScheduleKind::Diffusion => {
                check_dim("diffusion target", z0.len(), eps.len())?;
                Ok(eps.to_vec())
            }
            ScheduleKind::Flow => flow_velocity_target(z0, eps),
        }
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange {
            value: t,
            min: 0.0,
            max: 1.0,
        });
    }
    Ok(())
}

/// z_t = sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps.
pub fn diffuse_forward(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    check_dim("diffuse_forward", z0.len(), eps.len())?;
    if !sched.is_diffusion() {
        return Err(Error::InvalidSchedule("diffuse_forward needs a diffusion schedule".into()));
    }
    sched.check_time(Time::Step(t))?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentState {
        z: z0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect(),
        t: Time::Step(t),
    })
}

/// z_t = (1 − t)·z0 + t·eps.
pub fn flow_forward(z0: &[f64], t: f64, eps: &[f64]) -> Result<LatentState> {
    check_dim("flow_forward", z0.len(), eps.len())?;
    check_unit_time(t)?;
    Ok(LatentState {
        z: z0.iter().zip(eps).map(|(x, e)| (1.0 - t) * x + t * e).collect(),
        t: Time::Flow(t),
    })
}

/// d z_t / dt along the straight path: `eps - z0`.
pub fn flow_velocity_target(z0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_dim("flow_velocity_target", z0.len(), eps.len())?;
    Ok(eps.iter().zip(z0).map(|(e, x)| e - x).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_step(beta: f64) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Diffusion, 1, beta, beta).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn diffuse_quarter_alpha_bar() {
        // alpha_bar = 0.25 with a single step of beta = 0.75
        let s = one_step(0.75);
        let z = diffuse_forward(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap().z;
        assert!(close(&z, &[0.5, 0.75f64.sqrt()], 1e-15));
        assert!((z[1] - 0.8660254037844386).abs() < 1e-12);
        let z = diffuse_forward(&[2.0, 2.0], 1, &[0.0, 0.0], &s).unwrap().z;
        assert!(close(&z, &[1.0, 1.0], 1e-15));
    }

    #[test]
    fn diffuse_near_identity_first_step() {
        let s = NoiseSchedule::new(ScheduleKind::Diffusion, 1000, 1e-8, 1e-8).unwrap();
        let z = diffuse_forward(&[0.3, -1.2], 1, &[1.0, 1.0], &s).unwrap().z;
        assert!(close(&z, &[0.3, -1.2], 1e-3));
    }

    #[test]
    fn diffuse_errors() {
        let s = one_step(0.5);
        assert!(matches!(
            diffuse_forward(&[1.0], 1, &[1.0, 2.0], &s),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            diffuse_forward(&[1.0], 2, &[1.0], &s),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(diffuse_forward(&[1.0], 0, &[1.0], &s).is_err());
    }

    #[test]
    fn flow_endpoints_and_midpoint() {
        let z0 = [2.0, 0.0];
        let eps = [0.0, 2.0];
        assert_eq!(flow_forward(&z0, 0.0, &eps).unwrap().z, z0.to_vec());
        assert_eq!(flow_forward(&z0, 1.0, &eps).unwrap().z, eps.to_vec());
        assert_eq!(flow_forward(&z0, 0.5, &eps).unwrap().z, vec![1.0, 1.0]);
        assert!(flow_forward(&z0, 1.5, &eps).is_err());
        assert!(flow_forward(&z0, -0.1, &eps).is_err());
    }

    #[test]
    fn velocity_target_cases() {
        assert_eq!(flow_velocity_target(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(flow_velocity_target(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), vec![0.0, 0.0]);
        let v = flow_velocity_target(&[1.0, 3.0], &[-2.0, 0.5]).unwrap();
        let v2 = flow_velocity_target(&[2.0, 6.0], &[-4.0, 1.0]).unwrap();
        assert!(close(&v2, &[2.0 * v[0], 2.0 * v[1]], 1e-15));
        assert!(flow_velocity_target(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn schedule_single_term_and_constant() {
        let s = one_step(0.5);
        assert_eq!(s.alpha_bars, vec![0.5]);
        let c = NoiseSchedule::new(ScheduleKind::Diffusion, 10, 0.02, 0.02).unwrap();
        assert!(c.betas.iter().all(|&b| b == 0.02));
    }

    #[test]
    fn default_schedule_monotone_and_products() {
        let s = NoiseSchedule::new(ScheduleKind::Diffusion, 1000, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.betas[t - 1];
            assert_eq!(s.alpha_bar(t), prod);
            assert!(s.betas[t - 1] > 0.0 && s.betas[t - 1] < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(ScheduleKind::Diffusion, 10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Diffusion, 10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Diffusion, 10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Diffusion, 0, 0.1, 0.2).is_err());
        let f = NoiseSchedule::new(ScheduleKind::Flow, 1000, 5.0, -1.0).unwrap();
        assert!(f.betas.is_empty() && f.alpha_bars.is_empty());
    }

    #[test]
    fn marginal_moments_match() {
        let s = NoiseSchedule::new(ScheduleKind::Diffusion, 1000, 1e-4, 2e-2).unwrap();
        let t = 300;
        let z0 = [1.5, -0.7];
        let ab = s.alpha_bar(t);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let z = diffuse_forward(&z0, t, &eps, &s).unwrap().z;
            for k in 0..2 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        let var_true = 1.0 - ab;
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se_mean = (var_true / n as f64).sqrt();
            // standard error of the sample variance of a Gaussian
            let se_var = var_true * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((mean - ab.sqrt() * z0[k]).abs() < 3.0 * se_mean);
            assert!((var - var_true).abs() < 3.0 * se_var);
        }
    }

    proptest! {
        #[test]
        fn interpolation_consistency(
            z0 in proptest::collection::vec(-5.0f64..5.0, 3),
            eps in proptest::collection::vec(-5.0f64..5.0, 3),
            t in 0.0f64..=1.0,
        ) {
            let a = flow_forward(&z0, t, &eps).unwrap().z;
            let b = flow_forward(&z0, 0.0, &eps).unwrap().z;
            let v = flow_velocity_target(&z0, &eps).unwrap();
            for k in 0..3 {
                prop_assert!(((a[k] - b[k]) - t * v[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn alpha_bar_strictly_decreasing(
            t_train in 1usize..300,
            lo in 1e-5f64..0.05,
            span in 0.0f64..0.2,
        ) {
            let s = NoiseSchedule::new(ScheduleKind::Diffusion, t_train, lo, lo + span).unwrap();
            for t in 1..=t_train {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }
}
