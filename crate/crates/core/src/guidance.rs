//! Guided prediction combiners and the reverse-time integrators.
//!
//! Diffusion sampling walks a uniform stride over `{1..T}` that always
//! contains `T`, then lands at `ᾱ₀ = 1`. Flow sampling is explicit Euler from
//! `t = 1` down to `t = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::{make_proxy_embedding, ConditionEmbedding, Field};
use crate::parallel;
use crate::processes::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// Plain conditional prediction.
    None,
    Cfg,
    ChatsFull,
    ChatsProxy,
}

impl Combiner {
    pub fn name(self) -> &'static str {
        match self {
            Combiner::None => "none",
            Combiner::Cfg => "cfg",
            Combiner::ChatsFull => "chats_full",
            Combiner::ChatsProxy => "chats_proxy",
        }
    }

    pub fn needs_pair(self) -> bool {
        matches!(self, Combiner::ChatsFull | Combiner::ChatsProxy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// DDIM with η = 1 (fresh noise every step). Diffusion only.
    Ancestral,
    /// DDIM with η = 0 for diffusion; Euler for flow.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub combiner: Combiner,
    pub s: f64,
    pub alpha: f64,
    pub steps: usize,
    pub integrator: Integrator,
    /// Clamp each coordinate of the predicted clean sample to
    /// `[-clip_x0, clip_x0]` at every DDIM step. Diffusion only.
    #[serde(default)]
    pub clip_x0: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            combiner: Combiner::ChatsFull,
            s: 5.0,
            alpha: 0.5,
            steps: 50,
            integrator: Integrator::Deterministic,
            clip_x0: None,
        }
    }
}

impl GuidanceConfig {
    pub fn cfg(s: f64) -> Self {
        Self {
            combiner: Combiner::Cfg,
            s,
            ..Self::default()
        }
    }

    pub fn chats(s: f64, alpha: f64) -> Self {
        Self {
            s,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |path: &str, message: String| Err(Error::Config {
            path: path.into(),
            message,
        });
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return bad("guidance.s", format!("must be finite and >= 0, got {}", self.s));
        }
        if !self.alpha.is_finite() {
            return bad("guidance.alpha", "must be finite".into());
        }
        if self.steps == 0 {
            return bad("guidance.steps", "must be >= 1".into());
        }
        if let Some(c) = self.clip_x0 {
            if !(c > 0.0 && c.is_finite()) {
                return bad("guidance.clip_x0", format!("must be finite and > 0, got {c}"));
            }
            if sched.kind == ScheduleKind::Flow {
                return bad("guidance.clip_x0", "applies to diffusion sampling only".into());
            }
        }
        match sched.kind {
            ScheduleKind::Diffusion if self.steps > sched.train_steps => bad(
                "guidance.steps",
                format!("{} exceeds the {} training steps", self.steps, sched.train_steps),
            ),
            ScheduleKind::Flow if self.integrator == Integrator::Ancestral => {
                bad("guidance.integrator", "flow sampling is deterministic only".into())
            }
            _ => Ok(()),
        }
    }
}

/// (1+s)·ε_c − s·ε_∅.
pub fn combine_cfg(eps_cond: &[f64], eps_uncond: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim("combine_cfg", eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + s) * c - s * u)
        .collect())
}

/// (1+s)·ε⁺(c) − s·[−α·ε⁻(c) + (1+α)·ε⁻(∅)].
pub fn combine_chats_full(
    eps_plus_c: &[f64],
    eps_minus_c: &[f64],
    eps_minus_uncond: &[f64],
    s: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_dim("combine_chats_full", eps_plus_c.len(), eps_minus_c.len())?;
    check_dim("combine_chats_full", eps_plus_c.len(), eps_minus_uncond.len())?;
    Ok(eps_plus_c
        .iter()
        .zip(eps_minus_c)
        .zip(eps_minus_uncond)
        .map(|((p, mc), mu)| (1.0 + s) * p - s * (-alpha * mc + (1.0 + alpha) * mu))
        .collect())
}

/// (1+s)·ε⁺(c) − s·ε⁻(ĉ) with ĉ built from the dispreferred model's own
/// condition and null embeddings. Two forward passes.
#[allow(clippy::too_many_arguments)]
pub fn combine_chats_proxy<F: Field + ?Sized>(
    preferred: &F,
    dispreferred: &F,
    z: &[f64],
    t: f64,
    c_plus: &ConditionEmbedding,
    c_minus: &ConditionEmbedding,
    null_minus: &ConditionEmbedding,
    s: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let proxy = make_proxy_embedding(c_minus, null_minus, alpha)?;
    let ep = preferred.evaluate(z, t, c_plus)?;
    let em = dispreferred.evaluate(z, t, &proxy)?;
    combine_cfg(&ep, &em, s)
}

/// The network(s) a sampler draws predictions from.
#[derive(Debug, Clone, Copy)]
pub enum Guided<'a, F: Field + ?Sized> {
    Single(&'a F),
    Pair { preferred: &'a F, dispreferred: &'a F },
}

impl<'a, F: Field + ?Sized> Guided<'a, F> {
    fn preferred(&self) -> &'a F {
        match *self {
            Guided::Single(f) => f,
            Guided::Pair { preferred, .. } => preferred,
        }
    }

    fn dispreferred(&self) -> &'a F {
        match *self {
            Guided::Single(f) => f,
            Guided::Pair { dispreferred, .. } => dispreferred,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.preferred().data_dim()
    }

    /// Guided prediction at network time `t` for condition `cond`.
    ///
    /// With a pair, [`Combiner::Cfg`] is two-model CFG: θ⁺ conditional
    /// against θ⁻ unconditional.
    pub fn predict(&self, z: &[f64], t: f64, cond: usize, cfg: &GuidanceConfig) -> Result<Vec<f64>> {
        if cfg.combiner.needs_pair() && matches!(self, Guided::Single(_)) {
            return Err(Error::Config {
                path: "guidance.combiner".into(),
                message: format!("`{}` needs a preferred/dispreferred pair", cfg.combiner.name()),
            });
        }
        let (p, m) = (self.preferred(), self.dispreferred());
        let c_plus = p.embed(Some(cond))?;
        match cfg.combiner {
            Combiner::None => p.evaluate(z, t, &c_plus),
            Combiner::Cfg => {
                let ec = p.evaluate(z, t, &c_plus)?;
                let eu = m.evaluate(z, t, &m.embed(None)?)?;
                combine_cfg(&ec, &eu, cfg.s)
            }
            Combiner::ChatsFull => {
                let ep = p.evaluate(z, t, &c_plus)?;
                let emc = m.evaluate(z, t, &m.embed(Some(cond))?)?;
                let emu = m.evaluate(z, t, &m.embed(None)?)?;
                combine_chats_full(&ep, &emc, &emu, cfg.s, cfg.alpha)
            }
            Combiner::ChatsProxy => combine_chats_proxy(
                p,
                m,
                z,
                t,
                &c_plus,
                &m.embed(Some(cond))?,
                &m.embed(None)?,
                cfg.s,
                cfg.alpha,
            ),
        }
    }
}

/// Diffusion steps visited by a `steps`-step sampler, descending from `T`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|k| (k * train_steps).div_ceil(steps))
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_finite(z: &[f64], step: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplingDiverged { step })
    }
}

/// Euler integration of `dz/dt = v̂` over a uniform grid from `t_from` to
/// `t_to` (either direction).
pub fn flow_euler<F: Field + ?Sized>(
    models: &Guided<F>,
    cond: usize,
    cfg: &GuidanceConfig,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut z = z.to_vec();
    let dt = (t_to - t_from) / steps as f64;
    for k in 0..steps {
        let t = t_from + k as f64 * dt;
        let v = models.predict(&z, t.clamp(0.0, 1.0), cond, cfg)?;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += vi * dt;
        }
        check_finite(&z, k)?;
    }
    Ok(z)
}

/// Draws one sample for `cond`; all randomness comes from `seed`.
pub fn sample<F: Field + ?Sized>(
    models: &Guided<F>,
    cond: usize,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate(sched)?;
    models.preferred().mode().matches(sched.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(&mut rng, models.data_dim());
    match sched.kind {
        ScheduleKind::Flow => flow_euler(models, cond, cfg, &z, 1.0, 0.0, cfg.steps),
        ScheduleKind::Diffusion => ddim(models, cond, cfg, sched, z, &mut rng),
    }
}

fn ddim<F: Field + ?Sized>(
    models: &Guided<F>,
    cond: usize,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    mut z: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let ts = ddim_timesteps(sched.train_steps, cfg.steps);
    let d = z.len();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let eps = models.predict(&z, t as f64 / sched.train_steps as f64, cond, cfg)?;
        let sigma = match cfg.integrator {
            Integrator::Deterministic => 0.0,
            Integrator::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt(),
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            standard_normal(rng, d)
        } else {
            vec![0.0; d]
        };
        for i in 0..d {
            let mut x0 = (z[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
            let mut e = eps[i];
            if let Some(c) = cfg.clip_x0 {
                if x0.abs() > c {
                    // keep the noise estimate consistent with the clamped x0
                    x0 = x0.clamp(-c, c);
                    e = (z[i] - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                }
            }
            z[i] = ab_prev.sqrt() * x0 + dir * e + sigma * noise[i];
        }
        check_finite(&z, k)?;
    }
    Ok(z)
}

/// Samples every `(cond, seed)` job, in job order.
pub fn sample_batch<F: Field + ?Sized>(
    models: &Guided<F>,
    jobs: &[(usize, u64)],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate(sched)?;
    parallel::map_indexed(jobs.len(), |i| sample(models, jobs[i].0, cfg, sched, jobs[i].1))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ConditionalField, Conditioning, FieldMode};
    use crate::processes::ScheduleConfig;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn sched(kind: ScheduleKind) -> NoiseSchedule {
        ScheduleConfig {
            kind,
            ..ScheduleConfig::default()
        }
        .build()
        .unwrap()
    }

    fn net(kind: ScheduleKind, seed: u64, conditioning: Conditioning) -> ConditionalField {
        let mut arch = Architecture::mlp(2, 3, 4, vec![16, 16]);
        arch.conditioning = conditioning;
        let mut f = ConditionalField::new(arch, FieldMode::for_kind(kind), seed).unwrap();
        // break the zero-bias symmetry so outputs depend on every input
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in f.params.iter_mut() {
            *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        f
    }

    #[test]
    fn cfg_cases() {
        assert_eq!(combine_cfg(&[1.0, -2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, -2.0]);
        assert!(close(&combine_cfg(&[0.3, 0.7], &[0.3, 0.7], 9.0).unwrap(), &[0.3, 0.7], 1e-12));
        assert_eq!(combine_cfg(&[1.0, 0.0], &[0.0, 0.0], 5.0).unwrap(), vec![6.0, 0.0]);
        assert!(combine_cfg(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn chats_full_cases() {
        let out = combine_chats_full(&[1.0, 0.0], &[0.5, 0.0], &[0.0, 0.0], 5.0, 0.5).unwrap();
        assert!(close(&out, &[7.25, 0.0], 1e-15));
        let (p, mc, mu) = ([0.2, -1.0], [0.9, 0.4], [-0.3, 0.1]);
        let a0 = combine_chats_full(&p, &mc, &mu, 3.0, 0.0).unwrap();
        assert_eq!(a0, combine_cfg(&p, &mu, 3.0).unwrap());
        let v = [0.123, -4.5];
        for (s, a) in [(0.0, 0.0), (5.0, 0.5), (2.0, -1.3), (10.0, 7.0)] {
            assert!(close(&combine_chats_full(&v, &v, &v, s, a).unwrap(), &v, 1e-12));
        }
        assert!(combine_chats_full(&[1.0], &[1.0], &[1.0, 1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn proxy_matches_full_on_condition_linear_net() {
        let kind = ScheduleKind::Diffusion;
        let plus = net(kind, 1, Conditioning::Additive);
        let minus = net(kind, 2, Conditioning::Additive);
        let pair = Guided::Pair {
            preferred: &plus,
            dispreferred: &minus,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
            let t = rng.random_range(0.0..1.0);
            let cond = rng.random_range(0..4);
            let s = rng.random_range(0.0..10.0);
            let alpha = rng.random_range(-1.0..2.0);
            let full = pair.predict(&z, t, cond, &GuidanceConfig::chats(s, alpha)).unwrap();
            let proxy = pair
                .predict(
                    &z,
                    t,
                    cond,
                    &GuidanceConfig {
                        combiner: Combiner::ChatsProxy,
                        ..GuidanceConfig::chats(s, alpha)
                    },
                )
                .unwrap();
            assert!(close(&full, &proxy, 1e-10));
        }
    }

    #[test]
    fn proxy_degenerate_cases() {
        let f = net(ScheduleKind::Diffusion, 4, Conditioning::Concat);
        let g = net(ScheduleKind::Diffusion, 5, Conditioning::Concat);
        let pair = Guided::Pair {
            preferred: &f,
            dispreferred: &g,
        };
        let z = [0.4, -0.8];
        let proxy = |s, alpha| {
            GuidanceConfig {
                combiner: Combiner::ChatsProxy,
                ..GuidanceConfig::chats(s, alpha)
            }
        };
        let two_cfg = pair.predict(&z, 0.3, 2, &GuidanceConfig::cfg(5.0)).unwrap();
        assert!(close(&pair.predict(&z, 0.3, 2, &proxy(5.0, 0.0)).unwrap(), &two_cfg, 1e-12));
        let cond_only = f.evaluate(&z, 0.3, &f.embed(Some(2)).unwrap()).unwrap();
        assert!(close(&pair.predict(&z, 0.3, 2, &proxy(0.0, 0.8)).unwrap(), &cond_only, 1e-12));
    }

    #[test]
    fn chats_needs_pair() {
        let f = net(ScheduleKind::Diffusion, 6, Conditioning::Concat);
        let single = Guided::Single(&f);
        assert!(single.predict(&[0.0, 0.0], 0.5, 0, &GuidanceConfig::default()).is_err());
    }

    #[test]
    fn timestep_stride() {
        assert_eq!(ddim_timesteps(1000, 1), vec![1000]);
        assert_eq!(ddim_timesteps(10, 10), (1..=10).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let odd = ddim_timesteps(1000, 7);
        assert_eq!(odd[0], 1000);
        assert!(odd.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn config_validation() {
        let d = sched(ScheduleKind::Diffusion);
        let f = sched(ScheduleKind::Flow);
        assert!(GuidanceConfig::default().validate(&d).is_ok());
        let too_many = GuidanceConfig {
            steps: 1001,
            ..GuidanceConfig::default()
        };
        assert!(too_many.validate(&d).is_err());
        assert!(too_many.validate(&f).is_ok());
        let anc = GuidanceConfig {
            integrator: Integrator::Ancestral,
            ..GuidanceConfig::default()
        };
        assert!(anc.validate(&f).is_err());
        assert!(GuidanceConfig::cfg(-1.0).validate(&d).is_err());
        let clip = |c| GuidanceConfig {
            clip_x0: Some(c),
            ..GuidanceConfig::default()
        };
        assert!(clip(4.0).validate(&d).is_ok());
        assert!(clip(4.0).validate(&f).is_err());
        assert!(clip(0.0).validate(&d).is_err());
        assert!(clip(f64::INFINITY).validate(&d).is_err());
    }

    #[test]
    fn clipped_samples_stay_in_the_box() {
        let s = sched(ScheduleKind::Diffusion);
        let mut f = net(ScheduleKind::Diffusion, 9, Conditioning::Concat);
        for p in f.params.iter_mut() {
            *p *= 8.0;
        }
        let g = Guided::Single(&f);
        let wild = GuidanceConfig {
            integrator: Integrator::Ancestral,
            steps: 20,
            ..GuidanceConfig::cfg(5.0)
        };
        let clipped = GuidanceConfig {
            clip_x0: Some(0.3),
            ..wild
        };
        let mut escaped = 0;
        for seed in 0..50 {
            let z = sample(&g, 0, &clipped, &s, seed).unwrap();
            assert!(z.iter().all(|v| v.abs() <= 0.3), "{z:?}");
            escaped += sample(&g, 0, &wild, &s, seed).unwrap().iter().any(|v| v.abs() > 0.3) as usize;
        }
        assert!(escaped > 0);
        // a box wider than anything the sampler visits changes nothing
        let tame = net(ScheduleKind::Diffusion, 9, Conditioning::Concat);
        let g = Guided::Single(&tame);
        let loose = GuidanceConfig {
            clip_x0: Some(1e6),
            ..wild
        };
        assert_eq!(sample(&g, 2, &loose, &s, 3).unwrap(), sample(&g, 2, &wild, &s, 3).unwrap());
    }

    #[test]
    fn deterministic_sampling_is_bitwise_stable() {
        for kind in [ScheduleKind::Diffusion, ScheduleKind::Flow] {
            let s = sched(kind);
            let f = net(kind, 7, Conditioning::Concat);
            let g = Guided::Single(&f);
            let cfg = GuidanceConfig::cfg(5.0);
            let a = sample(&g, 1, &cfg, &s, 99).unwrap();
            let b = sample(&g, 1, &cfg, &s, 99).unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_ne!(a, sample(&g, 1, &cfg, &s, 100).unwrap());
        }
    }

    #[test]
    fn batch_matches_individual_samples() {
        let s = sched(ScheduleKind::Diffusion);
        let f = net(ScheduleKind::Diffusion, 8, Conditioning::Concat);
        let g = Guided::Single(&f);
        let cfg = GuidanceConfig {
            integrator: Integrator::Ancestral,
            steps: 20,
            ..GuidanceConfig::cfg(2.0)
        };
        let jobs: Vec<(usize, u64)> = (0..12).map(|i| (i % 4, 1000 + i as u64)).collect();
        let batch = sample_batch(&g, &jobs, &cfg, &s).unwrap();
        for (j, out) in jobs.iter().zip(&batch) {
            assert_eq!(out, &sample(&g, j.0, &cfg, &s, j.1).unwrap());
        }
    }

    #[test]
    fn mode_mismatch_rejected() {
        let f = net(ScheduleKind::Flow, 9, Conditioning::Concat);
        let r = sample(&Guided::Single(&f), 0, &GuidanceConfig::cfg(1.0), &sched(ScheduleKind::Diffusion), 0);
        assert!(matches!(r, Err(Error::ModeMismatch { .. })));
    }

    /// A field whose output blows up, to exercise the divergence guard.
    struct Exploding;

    impl Field for Exploding {
        fn data_dim(&self) -> usize {
            1
        }
        fn mode(&self) -> FieldMode {
            FieldMode::Velocity
        }
        fn embed(&self, _: Option<usize>) -> Result<ConditionEmbedding> {
            Ok(ConditionEmbedding::external(vec![]))
        }
        fn evaluate(&self, z: &[f64], _: f64, _: &ConditionEmbedding) -> Result<Vec<f64>> {
            Ok(vec![z[0] * 1e200 + 1e300])
        }
    }

    #[test]
    fn divergence_reports_step() {
        let s = sched(ScheduleKind::Flow);
        let r = sample(&Guided::Single(&Exploding), 0, &GuidanceConfig::cfg(0.0), &s, 1);
        assert!(matches!(r, Err(Error::SamplingDiverged { .. })));
    }
}
