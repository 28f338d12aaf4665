//! Pretraining and preference finetuning with Adam, condition dropout,
//! periodic checkpoints, and deterministic replay.
//!
//! Each step draws its batch from a ChaCha stream keyed by `(seed, step)`, so
//! a run is a pure function of its config, data and seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{clone_as_triple, ConditionalField, ModelTriple, Role};
use crate::objectives::{
    loss_chats_with, loss_dpo_single, loss_standard, LossReport, PairBatch, PairSample, PairTerms, ReferenceTerms,
    Sample,
};
use crate::preference_data::{PreferenceRecord, TaskSpec};
use crate::processes::{NoiseSchedule, ScheduleConfig, ScheduleKind, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    FinetuneChats,
    FinetuneDpo,
    /// Plain regression on samples flattened out of the preference pairs.
    FinetuneStandard,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneChats => "finetune_chats",
            Phase::FinetuneDpo => "finetune_dpo",
            Phase::FinetuneStandard => "finetune_standard",
        }
    }
}

/// Which samples [`Phase::FinetuneStandard`] builds from each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flatten {
    /// Both z⁺ and z⁻ as ordinary conditional samples.
    #[default]
    Full,
    PreferredOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a sample's condition with the null embedding.
    #[serde(default)]
    pub cond_dropout: f64,
    #[serde(default = "default_t_scale")]
    pub t_scale: f64,
    pub seed: u64,
    #[serde(default = "default_cadence")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub reference_terms: ReferenceTerms,
    #[serde(default)]
    pub flatten: Flatten,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_t_scale() -> f64 {
    1000.0
}

fn default_cadence() -> usize {
    500
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            steps: 20_000,
            batch_size: 128,
            lr: 1e-4,
            cond_dropout: 0.1,
            t_scale: default_t_scale(),
            seed,
            checkpoint_every: default_cadence(),
            reference_terms: ReferenceTerms::Anchored,
            flatten: Flatten::Full,
            adam: AdamConfig::default(),
        }
    }

    pub fn finetune(phase: Phase, seed: u64) -> Self {
        Self {
            phase,
            steps: 2_000,
            cond_dropout: 0.0,
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("train.{path}"),
                message,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout", format!("must lie in [0, 1), got {}", self.cond_dropout));
        }
        if self.cond_dropout > 0.0 && self.phase == Phase::FinetuneDpo {
            return bad("cond_dropout", "the single-model preference loss trains conditional terms only; must be 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.t_scale > 0.0 && self.t_scale.is_finite()) {
            return bad("t_scale", "must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be >= 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam", "betas must lie in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    fn expect_phase(&self, phase: Phase) -> Result<()> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(Error::Config {
                path: "train.phase".into(),
                message: format!("expected `{}`, got `{}`", phase.name(), self.phase.name()),
            })
        }
    }
}

/// Adam moments aligned with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            config,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }

    fn store(&self, ck: &mut Checkpoint, suffix: &str) {
        ck.push_array(&format!("adam_m{suffix}"), self.m.clone());
        ck.push_array(&format!("adam_v{suffix}"), self.v.clone());
    }
}

/// One row of the per-step metrics log. The loss and terms are measured on
/// the step's batch before its update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub terms: PairTerms,
    pub dist_plus_ref: f64,
    pub dist_minus_ref: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss,mse_plus_theta,mse_plus_ref,mse_minus_theta,mse_minus_ref,inner_argument,dist_plus_ref,dist_minus_ref";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 96 + METRICS_HEADER.len() + 1);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.terms;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.loss,
            t.mse_plus_theta,
            t.mse_plus_ref,
            t.mse_minus_theta,
            t.mse_minus_ref,
            t.inner_argument,
            r.dist_plus_ref,
            r.dist_minus_ref
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Receives every periodic checkpoint.
pub trait CheckpointSink {
    fn save(&mut self, step: u64, checkpoint: &Checkpoint) -> Result<()>;
}

/// Discards checkpoints.
pub struct NoCheckpoints;

impl CheckpointSink for NoCheckpoints {
    fn save(&mut self, _: u64, _: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(u64, &Checkpoint) -> Result<()>> CheckpointSink for F {
    fn save(&mut self, step: u64, checkpoint: &Checkpoint) -> Result<()> {
        self(step, checkpoint)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<M> {
    pub model: M,
    pub optimizers: Vec<OptimizerState>,
    pub metrics: Vec<MetricsRow>,
    /// Loss on the first batch before any update.
    pub initial: LossReport,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn draw_time(rng: &mut ChaCha8Rng, sched: &NoiseSchedule) -> Time {
    match sched.kind {
        ScheduleKind::Diffusion => Time::Step(rng.random_range(1..=sched.train_steps)),
        ScheduleKind::Flow => Time::Flow(rng.random::<f64>()),
    }
}

fn pretrain_batch(task: &TaskSpec, cfg: &TrainConfig, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let c = rng.random_range(0..task.num_conditions());
            let z0 = task.sample_mixture(c, rng)?;
            let drop = rng.random::<f64>() < cfg.cond_dropout;
            Ok(Sample {
                cond: if drop { None } else { Some(c) },
                eps: normal_vec(rng, z0.len()),
                t: draw_time(rng, sched),
                z0,
            })
        })
        .collect()
}

fn pair_batch(data: &[PreferenceRecord], cfg: &TrainConfig, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> PairBatch {
    let records = (0..cfg.batch_size)
        .map(|_| {
            let r = &data[rng.random_range(0..data.len())];
            let d = r.z_plus.len();
            PairSample {
                cond: r.cond,
                z0_plus: r.z_plus.clone(),
                z0_minus: r.z_minus.clone(),
                eps_plus: normal_vec(rng, d),
                eps_minus: normal_vec(rng, d),
                t: draw_time(rng, sched),
                drop_minus: cfg.cond_dropout > 0.0 && rng.random::<f64>() < cfg.cond_dropout,
            }
        })
        .collect();
    PairBatch { records }
}

fn flat_batch(data: &[PreferenceRecord], cfg: &TrainConfig, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|_| {
            let r = &data[rng.random_range(0..data.len())];
            let take_minus = cfg.flatten == Flatten::Full && rng.random::<bool>();
            let z0 = if take_minus { r.z_minus.clone() } else { r.z_plus.clone() };
            let drop = rng.random::<f64>() < cfg.cond_dropout;
            Sample {
                cond: if drop { None } else { Some(r.cond) },
                eps: normal_vec(rng, z0.len()),
                t: draw_time(rng, sched),
                z0,
            }
        })
        .collect()
}

/// The shared loop: evaluate on the step batch, check finiteness, update,
/// log, and emit checkpoints on cadence.
struct Loop<'a, S> {
    cfg: &'a TrainConfig,
    schedule: ScheduleConfig,
    state: S,
    optimizers: Vec<OptimizerState>,
    fields: fn(&mut S) -> Vec<&mut ConditionalField>,
    snapshot: fn(&S, Option<ScheduleConfig>) -> Checkpoint,
    distances: Box<dyn Fn(&S) -> (f64, f64) + 'a>,
}

impl<S> Loop<'_, S> {
    fn checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = (self.snapshot)(&self.state, Some(self.schedule.clone()));
        ck.manifest.step = Some(step);
        let suffixes: &[&str] = if self.optimizers.len() == 1 { &[""] } else { &["_preferred", "_dispreferred"] };
        for (o, s) in self.optimizers.iter().zip(suffixes) {
            o.store(&mut ck, s);
        }
        ck
    }

    fn run<L>(mut self, loss: L, sink: &mut dyn CheckpointSink) -> Result<TrainOutput<S>>
    where
        L: Fn(&S, &mut ChaCha8Rng) -> Result<LossReport>,
    {
        let mut metrics = Vec::with_capacity(self.cfg.steps);
        let mut last_good = self.checkpoint(0);
        let mut initial = None;
        for step in 1..=self.cfg.steps.max(1) as u64 {
            let mut rng = step_rng(self.cfg.seed, step);
            let report = match loss(&self.state, &mut rng) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::TrainingDiverged {
                        step: step as usize,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            if initial.is_none() {
                initial = Some(report.clone());
                if self.cfg.steps == 0 {
                    break;
                }
            }
            let (dp, dm) = (self.distances)(&self.state);
            metrics.push(MetricsRow {
                step,
                loss: report.loss,
                terms: report.terms.unwrap_or_default(),
                dist_plus_ref: dp,
                dist_minus_ref: dm,
            });
            let lr = self.cfg.lr;
            let grads_finite = report.gradients.iter().flatten().all(|g| g.is_finite());
            let mut fields = (self.fields)(&mut self.state);
            let params_finite = grads_finite && {
                for ((f, g), o) in fields.iter_mut().zip(&report.gradients).zip(self.optimizers.iter_mut()) {
                    o.update(&mut f.params, g, lr);
                }
                fields.iter().all(|f| f.is_finite())
            };
            if !params_finite {
                return Err(Error::TrainingDiverged {
                    step: step as usize,
                    last_good: Box::new(last_good),
                });
            }
            if step as usize % self.cfg.checkpoint_every == 0 || step as usize == self.cfg.steps {
                last_good = self.checkpoint(step);
                sink.save(step, &last_good)?;
            }
        }
        Ok(TrainOutput {
            model: self.state,
            optimizers: self.optimizers,
            metrics,
            initial: initial.expect("at least one batch is evaluated"),
        })
    }
}

fn single_fields(f: &mut ConditionalField) -> Vec<&mut ConditionalField> {
    vec![f]
}

fn single_snapshot(f: &ConditionalField, s: Option<ScheduleConfig>) -> Checkpoint {
    Checkpoint::single(f, s)
}

fn check_dataset(data: &[PreferenceRecord], base: &ConditionalField) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config {
            path: "dataset".into(),
            message: "preference dataset is empty".into(),
        });
    }
    for (i, r) in data.iter().enumerate() {
        if r.cond >= base.arch.num_conditions {
            return Err(Error::UnknownCondition(r.cond));
        }
        if r.z_plus.len() != base.arch.data_dim {
            return Err(Error::InvalidRecord {
                index: i,
                message: format!("dimension {} does not match the model's {}", r.z_plus.len(), base.arch.data_dim),
            });
        }
    }
    Ok(())
}

/// Trains `init` with the plain regression loss on fresh task draws.
pub fn pretrain(
    task: &TaskSpec,
    init: ConditionalField,
    cfg: &TrainConfig,
    sched_cfg: &ScheduleConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainOutput<ConditionalField>> {
    cfg.expect_phase(Phase::Pretrain)?;
    cfg.validate()?;
    let sched = sched_cfg.build()?;
    init.mode.matches(sched.kind)?;
    if init.arch.num_conditions != task.num_conditions() || init.arch.data_dim != task.data_dim {
        return Err(Error::ArchitectureMismatch(format!(
            "model has {} conditions / dim {}, task has {} / {}",
            init.arch.num_conditions,
            init.arch.data_dim,
            task.num_conditions(),
            task.data_dim
        )));
    }
    let p = init.param_count();
    Loop {
        cfg,
        schedule: sched_cfg.clone(),
        state: init,
        optimizers: vec![OptimizerState::new(p, cfg.adam)],
        fields: single_fields,
        snapshot: single_snapshot,
        distances: Box::new(|_| (0.0, 0.0)),
    }
    .run(
        |f, rng| loss_standard(f, &pretrain_batch(task, cfg, &sched, rng)?, &sched),
        sink,
    )
}

/// Clones `base` into a triple and trains θ⁺, θ⁻ on the CHATS loss.
pub fn finetune_chats(
    base: &ConditionalField,
    data: &[PreferenceRecord],
    cfg: &TrainConfig,
    sched_cfg: &ScheduleConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainOutput<ModelTriple>> {
    cfg.expect_phase(Phase::FinetuneChats)?;
    cfg.validate()?;
    check_dataset(data, base)?;
    let sched = sched_cfg.build()?;
    base.mode.matches(sched.kind)?;
    let triple = clone_as_triple(base)?;
    let ref_hash = triple.reference().param_hash();
    let p = base.param_count();
    let out = Loop {
        cfg,
        schedule: sched_cfg.clone(),
        state: triple,
        optimizers: vec![OptimizerState::new(p, cfg.adam), OptimizerState::new(p, cfg.adam)],
        fields: |t: &mut ModelTriple| vec![&mut t.preferred, &mut t.dispreferred],
        snapshot: |t: &ModelTriple, s| Checkpoint::triple(t, s),
        distances: Box::new(|t: &ModelTriple| {
            (t.preferred.distance(t.reference()), t.dispreferred.distance(t.reference()))
        }),
    }
    .run(
        |t, rng| {
            let batch = pair_batch(data, cfg, &sched, rng);
            loss_chats_with(
                t,
                &batch,
                &sched,
                cfg.t_scale,
                cfg.reference_terms,
                &[Role::Preferred, Role::Dispreferred],
            )
        },
        &mut |step: u64, ck: &Checkpoint| {
            assert_eq!(
                ck.field("reference")?.param_hash(),
                ref_hash,
                "reference parameters changed during finetuning"
            );
            sink.save(step, ck)
        },
    )?;
    Ok(out)
}

/// Single-model preference finetune against a frozen copy of `base`.
pub fn finetune_dpo(
    base: &ConditionalField,
    data: &[PreferenceRecord],
    cfg: &TrainConfig,
    sched_cfg: &ScheduleConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainOutput<ConditionalField>> {
    cfg.expect_phase(Phase::FinetuneDpo)?;
    cfg.validate()?;
    check_dataset(data, base)?;
    let sched = sched_cfg.build()?;
    base.mode.matches(sched.kind)?;
    let reference = base.clone();
    Loop {
        cfg,
        schedule: sched_cfg.clone(),
        state: base.clone(),
        optimizers: vec![OptimizerState::new(base.param_count(), cfg.adam)],
        fields: single_fields,
        snapshot: single_snapshot,
        distances: Box::new(|f: &ConditionalField| (f.distance(&reference), 0.0)),
    }
    .run(
        |f, rng| loss_dpo_single(f, &reference, &pair_batch(data, cfg, &sched, rng), &sched, cfg.t_scale),
        sink,
    )
}

/// Plain regression finetune on samples flattened out of the pairs.
pub fn finetune_standard(
    base: &ConditionalField,
    data: &[PreferenceRecord],
    cfg: &TrainConfig,
    sched_cfg: &ScheduleConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainOutput<ConditionalField>> {
    cfg.expect_phase(Phase::FinetuneStandard)?;
    cfg.validate()?;
    check_dataset(data, base)?;
    let sched = sched_cfg.build()?;
    base.mode.matches(sched.kind)?;
    Loop {
        cfg,
        schedule: sched_cfg.clone(),
        state: base.clone(),
        optimizers: vec![OptimizerState::new(base.param_count(), cfg.adam)],
        fields: single_fields,
        snapshot: single_snapshot,
        distances: Box::new(|f: &ConditionalField| (f.distance(base), 0.0)),
    }
    .run(|f, rng| loss_standard(f, &flat_batch(data, cfg, &sched, rng), &sched), sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, FieldMode};
    use crate::preference_data::{generate_pairs, RegimeConfig, TaskConfig};

    fn task() -> TaskSpec {
        TaskConfig::default().build().unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::mlp(2, 4, 8, vec![16, 16])
    }

    fn base(kind: ScheduleKind) -> ConditionalField {
        ConditionalField::new(small_arch(), FieldMode::for_kind(kind), 1).unwrap()
    }

    fn sched_cfg(kind: ScheduleKind) -> ScheduleConfig {
        ScheduleConfig {
            kind,
            ..ScheduleConfig::default()
        }
    }

    fn quick(phase: Phase, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            lr: 1e-3,
            checkpoint_every: 10,
            ..TrainConfig::finetune(phase, 7)
        }
    }

    fn data(n: usize) -> Vec<PreferenceRecord> {
        generate_pairs(&task(), &RegimeConfig { n_pairs: n, ..RegimeConfig::small_clean() }, 2).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut o = OptimizerState::new(3, AdamConfig::default());
        let mut p = vec![1.0, 1.0, 1.0];
        o.update(&mut p, &[2.0, -0.5, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn pretrain_loss_decreases_and_is_deterministic() {
        let t = task();
        let cfg = TrainConfig {
            phase: Phase::Pretrain,
            cond_dropout: 0.1,
            lr: 3e-3,
            ..quick(Phase::Pretrain, 400)
        };
        let sc = sched_cfg(ScheduleKind::Diffusion);
        let a = pretrain(&t, base(ScheduleKind::Diffusion), &cfg, &sc, &mut NoCheckpoints).unwrap();
        let w = 40;
        let head: f64 = a.metrics[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        let tail: f64 = a.metrics[a.metrics.len() - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        assert!(tail < head, "{tail} vs {head}");
        let b = pretrain(&t, base(ScheduleKind::Diffusion), &cfg, &sc, &mut NoCheckpoints).unwrap();
        let bytes = |f: &ConditionalField| Checkpoint::single(f, None).to_bytes().unwrap();
        assert_eq!(bytes(&a.model), bytes(&b.model));
    }

    #[test]
    fn zero_dropout_leaves_null_untouched() {
        let t = task();
        let cfg = TrainConfig {
            phase: Phase::Pretrain,
            cond_dropout: 0.0,
            ..quick(Phase::Pretrain, 30)
        };
        let init = base(ScheduleKind::Flow);
        let out = pretrain(&t, init.clone(), &cfg, &sched_cfg(ScheduleKind::Flow), &mut NoCheckpoints).unwrap();
        let null = |f: &ConditionalField| crate::models::Field::embed(f, None).unwrap().values;
        assert_eq!(null(&init), null(&out.model));
        assert_ne!(init.params, out.model.params);
    }

    #[test]
    fn zero_step_finetunes_are_identity() {
        let b = base(ScheduleKind::Diffusion);
        let sc = sched_cfg(ScheduleKind::Diffusion);
        let d = data(64);
        let c = finetune_chats(&b, &d, &quick(Phase::FinetuneChats, 0), &sc, &mut NoCheckpoints).unwrap();
        assert_eq!(c.model.preferred, b);
        assert_eq!(c.model.dispreferred, b);
        assert!((c.initial.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(c.metrics.is_empty());
        let p = finetune_dpo(&b, &d, &quick(Phase::FinetuneDpo, 0), &sc, &mut NoCheckpoints).unwrap();
        assert_eq!(p.model, b);
        assert!((p.initial.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn chats_keeps_reference_and_checkpoints_on_cadence() {
        let b = base(ScheduleKind::Flow);
        let sc = sched_cfg(ScheduleKind::Flow);
        let d = data(200);
        let mut seen = Vec::new();
        let out = finetune_chats(
            &b,
            &d,
            &quick(Phase::FinetuneChats, 25),
            &sc,
            &mut |step: u64, ck: &Checkpoint| {
                seen.push((step, ck.is_triple(), ck.array("adam_m_dispreferred").is_ok()));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec![(10, true, true), (20, true, true), (25, true, true)]);
        assert_eq!(out.model.reference().param_hash(), b.param_hash());
        assert_ne!(out.model.preferred.params, b.params);
        assert!(out.metrics.iter().all(|r| r.dist_minus_ref.is_finite()));
        assert!(out.metrics.last().unwrap().dist_minus_ref > 0.0);
    }

    #[test]
    fn single_small_step_does_not_increase_batch_loss() {
        let sched = sched_cfg(ScheduleKind::Diffusion).build().unwrap();
        let b = base(ScheduleKind::Diffusion);
        let d = data(500);
        let cfg = quick(Phase::FinetuneChats, 1);
        // start away from the ln 2 stationary point of the identical triple
        let warm = finetune_chats(&b, &d, &TrainConfig { steps: 20, ..cfg.clone() }, &sched_cfg(ScheduleKind::Diffusion), &mut NoCheckpoints)
            .unwrap()
            .model;
        let t = task();
        for k in 0..100u64 {
            let mut rng = step_rng(1000, k);
            let batch = pair_batch(&d, &cfg, &sched, &mut rng);
            let before = loss_chats_with(&warm, &batch, &sched, 1000.0, ReferenceTerms::Anchored, &[Role::Preferred, Role::Dispreferred]).unwrap();
            let mut trial = warm.clone();
            for (f, g) in [&mut trial.preferred, &mut trial.dispreferred].into_iter().zip(&before.gradients) {
                OptimizerState::new(g.len(), AdamConfig::default()).update(&mut f.params, g, 1e-4);
            }
            let after = loss_chats_with(&trial, &batch, &sched, 1000.0, ReferenceTerms::Anchored, &[Role::Preferred, Role::Dispreferred]).unwrap();
            assert!(after.loss <= before.loss + 1e-12, "batch {k}: {} -> {}", before.loss, after.loss);
            let mut sample_batch = pretrain_batch(&t, &cfg, &sched, &mut rng).unwrap();
            sample_batch.truncate(16);
            let s0 = loss_standard(&warm.preferred, &sample_batch, &sched).unwrap();
            let mut g = warm.preferred.clone();
            OptimizerState::new(g.param_count(), AdamConfig::default()).update(&mut g.params, &s0.gradients[0], 1e-4);
            assert!(loss_standard(&g, &sample_batch, &sched).unwrap().loss <= s0.loss + 1e-12);
        }
    }

    #[test]
    fn standard_finetune_flattening() {
        let b = base(ScheduleKind::Diffusion);
        let sc = sched_cfg(ScheduleKind::Diffusion);
        let d = data(100);
        let full = finetune_standard(&b, &d, &quick(Phase::FinetuneStandard, 5), &sc, &mut NoCheckpoints).unwrap();
        let pref = finetune_standard(
            &b,
            &d,
            &TrainConfig {
                flatten: Flatten::PreferredOnly,
                ..quick(Phase::FinetuneStandard, 5)
            },
            &sc,
            &mut NoCheckpoints,
        )
        .unwrap();
        assert_ne!(full.model.params, pref.model.params);
    }

    #[test]
    fn wrong_phase_and_bad_config_rejected() {
        let b = base(ScheduleKind::Diffusion);
        let sc = sched_cfg(ScheduleKind::Diffusion);
        let d = data(10);
        assert!(finetune_dpo(&b, &d, &quick(Phase::FinetuneChats, 1), &sc, &mut NoCheckpoints).is_err());
        let bad = TrainConfig {
            cond_dropout: 1.0,
            ..quick(Phase::FinetuneDpo, 1)
        };
        assert!(matches!(finetune_dpo(&b, &d, &bad, &sc, &mut NoCheckpoints), Err(Error::Config { .. })));
        assert!(finetune_dpo(&b, &[], &quick(Phase::FinetuneDpo, 1), &sc, &mut NoCheckpoints).is_err());
    }

    #[test]
    fn divergence_returns_last_good() {
        let b = base(ScheduleKind::Diffusion);
        let sc = sched_cfg(ScheduleKind::Diffusion);
        let d = data(50);
        let cfg = TrainConfig {
            lr: 1e300,
            ..quick(Phase::FinetuneDpo, 50)
        };
        match finetune_dpo(&b, &d, &cfg, &sc, &mut NoCheckpoints) {
            Err(Error::TrainingDiverged { last_good, step }) => {
                assert!(step >= 1);
                assert!(last_good.field("params").unwrap().is_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
        }
    }
}
