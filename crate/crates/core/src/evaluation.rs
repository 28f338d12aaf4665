//! Oracle-reward evaluation of sampler/model configurations: paired win
//! rates, energy distance to the preferred mode, and report tables.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceConfig, Guided};
use crate::models::ConditionalField;
use crate::parallel;
use crate::preference_data::{record_seed, TaskSpec};
use crate::processes::NoiseSchedule;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of ‖x_i − y_j‖ over all pairs.
fn cross_mean(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let s = parallel::sum_vectors(x.len(), 1, |i, acc| {
        acc[0] += y.iter().map(|yj| dist(&x[i], yj)).sum::<f64>();
    });
    s[0] / (x.len() * y.len()) as f64
}

/// Mean of ‖x_i − x_j‖ over distinct pairs (0 for fewer than two points).
pub fn within_mean(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let s = parallel::sum_vectors(n, 1, |i, acc| {
        acc[0] += x[i + 1..].iter().map(|xj| dist(&x[i], xj)).sum::<f64>();
    });
    2.0 * s[0] / (n * (n - 1)) as f64
}

/// Energy distance 2·E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖ with unbiased within-sample
/// terms. Can dip slightly below zero for nearby distributions.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    energy_distance_with(x, y, within_mean(y))
}

/// [`energy_distance`] with the `y` self-term supplied.
pub fn energy_distance_with(x: &[Vec<f64>], y: &[Vec<f64>], y_within: f64) -> f64 {
    if x.is_empty() || y.is_empty() {
        return f64::NAN;
    }
    2.0 * cross_mean(x, y) - within_mean(x) - y_within
}

/// Paired win rate of `a` over `b`; ties count one half.
pub fn win_rate(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "win rate needs paired samples");
    if a.is_empty() {
        return 0.5;
    }
    let doubled: usize = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x > y {
                2
            } else if x == y {
                1
            } else {
                0
            }
        })
        .sum();
    doubled as f64 / (2 * a.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub seeds: Vec<u64>,
    pub conditions: Vec<usize>,
    pub samples_per: usize,
    /// Draws from each condition's preferred component for the energy distance.
    pub reference_draws: usize,
    pub reference_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            seeds: (0..8).collect(),
            conditions: (0..8).collect(),
            samples_per: 64,
            reference_draws: 10_000,
            reference_seed: 0x5eed,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if self.seeds.is_empty() || self.conditions.is_empty() || self.samples_per == 0 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "seeds, conditions and samples_per must be nonempty".into(),
            });
        }
        if let Some(&c) = self.conditions.iter().find(|&&c| c >= task.num_conditions()) {
            return Err(Error::UnknownCondition(c));
        }
        Ok(())
    }

    /// `(cond, sampler seed)` per sample, ordered seed-major, then condition,
    /// then replicate. Shared across configurations, so results are paired.
    pub fn jobs(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::with_capacity(self.seeds.len() * self.conditions.len() * self.samples_per);
        for &s in &self.seeds {
            for &c in &self.conditions {
                for j in 0..self.samples_per {
                    out.push((c, record_seed(s, ((c as u64) << 32) | j as u64)));
                }
            }
        }
        out
    }
}

/// Preferred-component draws and their self-term, per evaluated condition.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub conditions: Vec<usize>,
    pub draws: Vec<Vec<Vec<f64>>>,
    pub within: Vec<f64>,
}

impl ReferenceSet {
    pub fn build(task: &TaskSpec, protocol: &EvalProtocol) -> Result<Self> {
        let mut draws = Vec::with_capacity(protocol.conditions.len());
        for &c in &protocol.conditions {
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.reference_seed);
            rng.set_stream(c as u64);
            draws.push(
                (0..protocol.reference_draws)
                    .map(|_| task.sample_preferred(c, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let within = draws.iter().map(|d| within_mean(d)).collect();
        Ok(Self {
            conditions: protocol.conditions.clone(),
            draws,
            within,
        })
    }
}

/// Samples and oracle rewards of one configuration, in [`EvalProtocol::jobs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEval {
    pub samples: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub seed_means: Vec<f64>,
    pub mean_reward: f64,
    pub stderr: f64,
    /// Mean over conditions of the energy distance to the preferred component.
    pub energy_distance: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and standard error from per-seed means.
pub fn seed_summary(seed_means: &[f64]) -> (f64, f64) {
    let m = mean(seed_means);
    let n = seed_means.len();
    if n < 2 {
        return (m, 0.0);
    }
    let var = seed_means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Scores already-drawn samples.
pub fn score_samples(
    samples: Vec<Vec<f64>>,
    task: &TaskSpec,
    protocol: &EvalProtocol,
    reference: &ReferenceSet,
) -> Result<ConfigEval> {
    let jobs = protocol.jobs();
    if samples.len() != jobs.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluation samples".into(),
            expected: jobs.len(),
            actual: samples.len(),
        });
    }
    let rewards = jobs
        .iter()
        .zip(&samples)
        .map(|(&(c, _), z)| task.oracle_reward(c, z))
        .collect::<Result<Vec<_>>>()?;
    let per_seed = protocol.conditions.len() * protocol.samples_per;
    let seed_means: Vec<f64> = rewards.chunks(per_seed).map(mean).collect();
    let (mean_reward, stderr) = seed_summary(&seed_means);
    let mut eds = Vec::with_capacity(reference.conditions.len());
    for (k, &c) in reference.conditions.iter().enumerate() {
        let xs: Vec<Vec<f64>> = jobs
            .iter()
            .zip(&samples)
            .filter(|((jc, _), _)| *jc == c)
            .map(|(_, z)| z.clone())
            .collect();
        eds.push(energy_distance_with(&xs, &reference.draws[k], reference.within[k]));
    }
    Ok(ConfigEval {
        samples,
        rewards,
        seed_means,
        mean_reward,
        stderr,
        energy_distance: mean(&eds),
    })
}

/// Draws every protocol sample under `guidance` and scores it.
pub fn evaluate_config(
    models: &Guided<ConditionalField>,
    guidance: &GuidanceConfig,
    task: &TaskSpec,
    sched: &NoiseSchedule,
    protocol: &EvalProtocol,
    reference: &ReferenceSet,
) -> Result<ConfigEval> {
    protocol.validate(task)?;
    guidance.validate(sched)?;
    let jobs = protocol.jobs();
    let samples = parallel::map_indexed(jobs.len(), |i| sample(models, jobs[i].0, guidance, sched, jobs[i].1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    score_samples(samples, task, protocol, reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub s: f64,
    pub alpha: Option<f64>,
    pub mean_reward: f64,
    pub stderr: f64,
    /// Paired win rates, aligned with [`ReportTable::baselines`]; `None`
    /// where the row is the baseline itself or was not compared.
    pub win_rates: Vec<Option<f64>>,
    pub energy_distance: f64,
    pub n_samples: usize,
}

impl ReportRow {
    pub fn from_eval(label: &str, guidance: &GuidanceConfig, alpha: Option<f64>, e: &ConfigEval) -> Self {
        Self {
            label: label.to_string(),
            s: guidance.s,
            alpha,
            mean_reward: e.mean_reward,
            stderr: e.stderr,
            win_rates: Vec::new(),
            energy_distance: e.energy_distance,
            n_samples: e.rewards.len(),
        }
    }

    /// Fills win rates against each `(label, eval)` baseline.
    pub fn compare(&mut self, e: &ConfigEval, baselines: &[(&str, &ConfigEval)]) {
        self.win_rates = baselines
            .iter()
            .map(|(name, b)| (*name != self.label).then(|| win_rate(&e.rewards, &b.rewards)))
            .collect();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub baselines: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportTable {
    pub fn new(baselines: &[&str]) -> Self {
        Self {
            baselines: baselines.iter().map(|b| b.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn win_header(&self) -> String {
        self.baselines.iter().map(|b| format!(",win_vs_{b}")).collect()
    }

    fn wins(&self, r: &ReportRow, blank: &str) -> String {
        (0..self.baselines.len())
            .map(|i| match r.win_rates.get(i).copied().flatten() {
                Some(w) => format!(",{w}"),
                None => format!(",{blank}"),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("label,s,alpha,mean_reward,stderr{},energy_distance,n_samples\n", self.win_header());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}{},{},{}",
                r.label,
                r.s,
                opt(r.alpha),
                r.mean_reward,
                r.stderr,
                self.wins(r, ""),
                r.energy_distance,
                r.n_samples
            );
        }
        out
    }

    /// Numeric-only CSV keyed by `param` (`alpha` or `s`), for plotting a sweep.
    pub fn to_sweep_csv(&self, param: &str) -> String {
        let mut out = format!("{param},mean_reward{},energy_distance\n", self.win_header());
        for r in &self.rows {
            let x = if param == "s" { Some(r.s) } else { r.alpha };
            let _ = writeln!(
                out,
                "{},{}{},{}",
                opt(x),
                r.mean_reward,
                self.wins(r, "nan"),
                r.energy_distance
            );
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Win rate of row `label` against baseline `baseline`.
    pub fn win(&self, label: &str, baseline: &str) -> Option<f64> {
        let i = self.baselines.iter().position(|b| b == baseline)?;
        self.row(label)?.win_rates.get(i).copied().flatten()
    }
}

/// One row per α under the full CHATS combiner at scale `s`, with win rates
/// against each baseline.
pub fn sweep_alpha(
    preferred: &ConditionalField,
    dispreferred: &ConditionalField,
    alphas: &[f64],
    base_guidance: &GuidanceConfig,
    task: &TaskSpec,
    sched: &NoiseSchedule,
    protocol: &EvalProtocol,
    reference: &ReferenceSet,
    baselines: &[(&str, &ConfigEval)],
) -> Result<(ReportTable, Vec<ConfigEval>)> {
    let pair = Guided::Pair {
        preferred,
        dispreferred,
    };
    let names: Vec<&str> = baselines.iter().map(|b| b.0).collect();
    let mut table = ReportTable::new(&names);
    let mut evals = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let g = GuidanceConfig {
            alpha,
            ..*base_guidance
        };
        let e = evaluate_config(&pair, &g, task, sched, protocol, reference)?;
        let mut row = ReportRow::from_eval(&format!("alpha={alpha}"), &g, Some(alpha), &e);
        row.compare(&e, baselines);
        table.rows.push(row);
        evals.push(e);
    }
    Ok((table, evals))
}
