//! Synthetic conditional tasks with an exact reward oracle, preference-pair
//! generation, and JSON-lines storage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::objectives::bt_probability;
use crate::parallel;

/// One condition: a Gaussian mixture with a shared isotropic scale and a
/// designated preferred component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub preferred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub data_dim: usize,
    /// Per-coordinate standard deviation of every mixture component.
    pub sigma: f64,
    /// Length scale ℓ of the reward's squared-distance term.
    pub reward_scale: f64,
    /// Weight λ of the off-manifold penalty.
    pub penalty_weight: f64,
    /// Distance from the nearest own mode, in units of σ, beyond which the
    /// penalty applies.
    pub penalty_radius: f64,
    pub conditions: Vec<ConditionSpec>,
}

/// Parameters of the built-in ring task. Each condition sits at one angle of
/// a ring and owns an inner and an outer mode along that ray; the preferred
/// one alternates between inner and outer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub name: String,
    pub num_conditions: usize,
    pub ring_radius: f64,
    pub sigma: f64,
    /// Distance between a condition's two modes, in units of σ.
    pub separation: f64,
    /// Mixture weight of the preferred component.
    pub preferred_weight: f64,
    pub reward_scale: f64,
    pub penalty_weight: f64,
    pub penalty_radius: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "two-moons-of-modes".into(),
            num_conditions: 8,
            ring_radius: 3.0,
            sigma: 0.35,
            separation: 4.0,
            preferred_weight: 0.5,
            reward_scale: 1.0,
            penalty_weight: 1.0,
            penalty_radius: 3.0,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<TaskSpec> {
        let bad = |path: &str, message: &str| Error::Config {
            path: format!("task.{path}"),
            message: message.into(),
        };
        if self.num_conditions == 0 {
            return Err(bad("num_conditions", "must be >= 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma", "must be positive"));
        }
        if !(self.preferred_weight > 0.0 && self.preferred_weight < 1.0) {
            return Err(bad("preferred_weight", "must lie in (0, 1)"));
        }
        let half = 0.5 * self.separation * self.sigma;
        let conditions = (0..self.num_conditions)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / self.num_conditions as f64;
                let (sin, cos) = theta.sin_cos();
                let at = |r: f64| vec![r * cos, r * sin];
                let preferred = k % 2;
                let mut weights = vec![1.0 - self.preferred_weight; 2];
                weights[preferred] = self.preferred_weight;
                ConditionSpec {
                    means: vec![at(self.ring_radius - half), at(self.ring_radius + half)],
                    weights,
                    preferred,
                }
            })
            .collect();
        let task = TaskSpec {
            name: self.name.clone(),
            data_dim: 2,
            sigma: self.sigma,
            reward_scale: self.reward_scale,
            penalty_weight: self.penalty_weight,
            penalty_radius: self.penalty_radius,
            conditions,
        };
        task.validate()?;
        Ok(task)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl TaskSpec {
    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config {
            path: "task".into(),
            message,
        };
        if !(self.reward_scale > 0.0) || !(self.penalty_weight >= 0.0) || !(self.penalty_radius >= 0.0) {
            return Err(bad("reward_scale must be positive, penalty terms nonnegative".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.means.len() < 2 {
                return Err(bad(format!("condition {i} needs at least two modes")));
            }
            if c.weights.len() != c.means.len() || c.weights.iter().any(|w| !(*w > 0.0)) {
                return Err(bad(format!("condition {i} needs one positive weight per mode")));
            }
            if c.preferred >= c.means.len() {
                return Err(bad(format!("condition {i} preferred mode out of range")));
            }
            for m in &c.means {
                check_dim("task mode mean", self.data_dim, m.len())?;
            }
        }
        Ok(())
    }

    fn condition(&self, c: usize) -> Result<&ConditionSpec> {
        self.conditions.get(c).ok_or(Error::UnknownCondition(c))
    }

    pub fn preferred_mean(&self, c: usize) -> Result<&[f64]> {
        let spec = self.condition(c)?;
        Ok(&spec.means[spec.preferred])
    }

    /// r(z, c) = −‖z − μ⁺_c‖² / ℓ² − λ·max(0, d_c(z) − κσ)², where d_c is the
    /// distance to the nearest of the condition's own modes.
    pub fn oracle_reward(&self, c: usize, z: &[f64]) -> Result<f64> {
        let spec = self.condition(c)?;
        check_dim("oracle_reward", self.data_dim, z.len())?;
        let fit = sq_dist(z, &spec.means[spec.preferred]) / (self.reward_scale * self.reward_scale);
        let nearest = spec
            .means
            .iter()
            .map(|m| sq_dist(z, m))
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        let excess = (nearest - self.penalty_radius * self.sigma).max(0.0);
        Ok(-fit - self.penalty_weight * excess * excess)
    }

    fn draw_component<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        mean.iter()
            .map(|m| m + self.sigma * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    }

    /// One draw from the condition's full mixture.
    pub fn sample_mixture<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<Vec<f64>> {
        let spec = self.condition(c)?;
        let total: f64 = spec.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut k = spec.weights.len() - 1;
        for (i, w) in spec.weights.iter().enumerate() {
            if u < *w {
                k = i;
                break;
            }
            u -= w;
        }
        Ok(self.draw_component(&spec.means[k], rng))
    }

    /// One draw from the condition's preferred component.
    pub fn sample_preferred<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mean = self.preferred_mean(c)?.to_vec();
        Ok(self.draw_component(&mean, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Hard,
    Bt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Labeler {
    /// Order by oracle reward; candidate pairs closer than `min_margin` in
    /// reward are redrawn.
    Hard { min_margin: f64 },
    /// Bradley–Terry draw on rewards corrupted by Gaussian noise:
    /// P(a ≻ b) = σ(scale · (r̃_a − r̃_b)).
    BradleyTerry { reward_noise: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub n_pairs: usize,
    pub labeler: Labeler,
}

impl RegimeConfig {
    pub fn small_clean() -> Self {
        Self {
            n_pairs: 7459,
            labeler: Labeler::Hard { min_margin: 0.5 },
        }
    }

    pub fn large_noisy() -> Self {
        Self {
            n_pairs: 100_000,
            labeler: Labeler::BradleyTerry {
                reward_noise: 0.5,
                scale: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub cond: usize,
    pub z_plus: Vec<f64>,
    pub z_minus: Vec<f64>,
    pub r_plus: f64,
    pub r_minus: f64,
    pub label: LabelSource,
    pub seed: u64,
    /// Probability of the recorded ordering under the labeler (BT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl PreferenceRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.z_plus.len() != self.z_minus.len() {
            return Err("z_plus and z_minus differ in dimension".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.z_plus) || !finite(&self.z_minus) || !self.r_plus.is_finite() || !self.r_minus.is_finite() {
            return Err("non-finite value".into());
        }
        if self.z_plus == self.z_minus {
            return Err("z_plus equals z_minus".into());
        }
        match self.label {
            LabelSource::Hard if !(self.r_plus > self.r_minus) => {
                Err(format!("hard label with r_plus {} <= r_minus {}", self.r_plus, self.r_minus))
            }
            LabelSource::Bt if !self.p.is_some_and(|p| p > 0.0 && p < 1.0) => {
                Err("bt label needs a probability p in (0, 1)".into())
            }
            _ => Ok(()),
        }
    }
}

/// Bradley–Terry draw between two candidates with rewards `r_a`, `r_b`.
/// Returns whether `a` wins and the probability of the realized outcome.
pub fn bt_label<R: Rng + ?Sized>(r_a: f64, r_b: f64, reward_noise: f64, scale: f64, rng: &mut R) -> (bool, f64) {
    let (na, nb) = if reward_noise > 0.0 {
        let n = Normal::new(0.0, reward_noise).expect("finite noise");
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let p_a = bt_probability(scale * (r_a + na), scale * (r_b + nb));
    let a_wins = rng.random::<f64>() < p_a;
    let p = if a_wins { p_a } else { 1.0 - p_a };
    (a_wins, p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// Seed for record `index` of a dataset generated from `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

const MAX_REDRAWS: usize = 10_000;

fn generate_one(task: &TaskSpec, labeler: &Labeler, seed: u64) -> Result<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = rng.random_range(0..task.num_conditions());
    for _ in 0..MAX_REDRAWS {
        let a = task.sample_mixture(cond, &mut rng)?;
        let b = task.sample_mixture(cond, &mut rng)?;
        let (ra, rb) = (task.oracle_reward(cond, &a)?, task.oracle_reward(cond, &b)?);
        let (a_first, label, p) = match *labeler {
            Labeler::Hard { min_margin } => {
                if (ra - rb).abs() <= min_margin.max(0.0) {
                    continue;
                }
                (ra > rb, LabelSource::Hard, None)
            }
            Labeler::BradleyTerry { reward_noise, scale } => {
                let (a_wins, p) = bt_label(ra, rb, reward_noise, scale, &mut rng);
                (a_wins, LabelSource::Bt, Some(p))
            }
        };
        let (z_plus, z_minus, r_plus, r_minus) = if a_first { (a, b, ra, rb) } else { (b, a, rb, ra) };
        return Ok(PreferenceRecord {
            cond,
            z_plus,
            z_minus,
            r_plus,
            r_minus,
            label,
            seed,
            p,
        });
    }
    Err(Error::Config {
        path: "regime.labeler.min_margin".into(),
        message: format!("no candidate pair cleared the margin in {MAX_REDRAWS} draws"),
    })
}

/// `n_pairs` records, each reproducible from its own derived seed.
pub fn generate_pairs(task: &TaskSpec, regime: &RegimeConfig, seed: u64) -> Result<Vec<PreferenceRecord>> {
    task.validate()?;
    parallel::map_indexed(regime.n_pairs, |i| generate_one(task, &regime.labeler, record_seed(seed, i as u64)))
        .into_iter()
        .collect()
}

pub fn write_pairs(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a JSON-lines dataset.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<PreferenceRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| Error::InvalidRecord { index: out.len(), message })?;
        if let Some(first) = out.first() {
            if first.z_plus.len() != rec.z_plus.len() {
                return Err(Error::InvalidRecord {
                    index: out.len(),
                    message: format!("dimension {} differs from {}", rec.z_plus.len(), first.z_plus.len()),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
