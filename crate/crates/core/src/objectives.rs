//! Training objectives: the plain denoising/velocity regression, the
//! single-model DPO baseline, and the dual-model CHATS loss.
//!
//! Every preference loss has the shape `−log σ(−T · Σ ±(m_θ − m_ref))` where
//! `m = ‖target − prediction‖²`. With `T = 1000` the argument saturates easily,
//! so the value and its derivative go through [`softplus`] and [`sigmoid`]
//! in their overflow-safe forms.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::{ConditionalField, Field, ModelTriple, Role};
use crate::parallel;
use crate::processes::{NoiseSchedule, Time};

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) = −softplus(−x).
#[inline]
pub fn logsigmoid_stable(x: f64) -> f64 {
    -softplus(-x)
}

/// Bradley–Terry preference probability σ(r⁺ − r⁻).
pub fn bt_probability(r_plus: f64, r_minus: f64) -> f64 {
    sigmoid(r_plus - r_minus)
}

/// One plain regression sample. `cond = None` trains the null branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cond: Option<usize>,
    pub z0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: Time,
}

/// One preference record with its recorded noise and time.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub cond: usize,
    pub z0_plus: Vec<f64>,
    pub z0_minus: Vec<f64>,
    pub eps_plus: Vec<f64>,
    pub eps_minus: Vec<f64>,
    pub t: Time,
    /// Score the dispreferred side under the null condition.
    pub drop_minus: bool,
}

impl PairSample {
    /// Same record with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            cond: self.cond,
            z0_plus: self.z0_minus.clone(),
            z0_minus: self.z0_plus.clone(),
            eps_plus: self.eps_minus.clone(),
            eps_minus: self.eps_plus.clone(),
            t: self.t,
            drop_minus: self.drop_minus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub records: Vec<PairSample>,
}

/// Batch means of the four squared residual norms and of the sigmoid argument.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PairTerms {
    pub mse_plus_theta: f64,
    pub mse_plus_ref: f64,
    pub mse_minus_theta: f64,
    pub mse_minus_ref: f64,
    pub inner_argument: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `None` for the plain regression loss.
    pub terms: Option<PairTerms>,
    /// One gradient per trainable field: `[θ]` for the single-model losses,
    /// `[θ⁺, θ⁻]` (restricted to the requested roles, in that order) for CHATS.
    pub gradients: Vec<Vec<f64>>,
}

/// Whether the reference residuals enter the CHATS bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceTerms {
    #[default]
    Anchored,
    /// Reference residuals replaced by zero ("two models w/o ref").
    Dropped,
}

fn squared_residual(target: &[f64], pred: &[f64], residual: &mut Vec<f64>) -> f64 {
    residual.clear();
    residual.extend(target.iter().zip(pred).map(|(a, b)| a - b));
    residual.iter().map(|r| r * r).sum()
}

/// Runs `f` for every record, summing into a `dim`-slot accumulator in a
/// fixed order. The first error raised by any record is returned.
fn reduce<F>(n: usize, dim: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync + Send,
{
    let failure: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    let acc = parallel::sum_vectors(n, dim, |i, acc| {
        if let Err(e) = f(i, acc) {
            let mut slot = failure.lock().unwrap();
            if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                *slot = Some((i, e));
            }
        }
    });
    if let Some((_, e)) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(acc)
}

fn check_sample_dims(d: usize, parts: &[&[f64]]) -> Result<()> {
    for p in parts {
        check_dim("batch record", d, p.len())?;
    }
    Ok(())
}

/// Mean over the batch of ‖target − f(z_t, t, c)‖², target being the noise
/// (diffusion) or `eps − z0` (flow).
pub fn loss_standard(field: &ConditionalField, batch: &[Sample], sched: &NoiseSchedule) -> Result<LossReport> {
    field.mode.matches(sched.kind)?;
    let d = field.arch.data_dim;
    for s in batch {
        check_sample_dims(d, &[&s.z0, &s.eps])?;
        sched.check_time(s.t)?;
    }
    if batch.is_empty() {
        return Ok(LossReport {
            loss: 0.0,
            terms: None,
            gradients: vec![vec![0.0; field.param_count()]],
        });
    }
    let n = batch.len() as f64;
    let p = field.param_count();
    let acc = reduce(batch.len(), 1 + p, |i, acc| {
        let s = &batch[i];
        let zt = sched.corrupt(&s.z0, s.t, &s.eps)?;
        let target = sched.target(&s.z0, &s.eps)?;
        let emb = field.embed(s.cond)?;
        let tn = sched.network_time(s.t);
        let pred = field.evaluate(&zt, tn, &emb)?;
        let mut r = Vec::with_capacity(d);
        let m = squared_residual(&target, &pred, &mut r);
        acc[0] += m / n;
        let upstream: Vec<f64> = r.iter().map(|ri| -2.0 * ri / n).collect();
        field.accumulate_gradient(&zt, tn, &emb, &upstream, &mut acc[1..])?;
        Ok(())
    })?;
    Ok(LossReport {
        loss: acc[0],
        terms: None,
        gradients: vec![acc[1..].to_vec()],
    })
}

struct Side<'a> {
    zt: Vec<f64>,
    target: Vec<f64>,
    tn: f64,
    emb_of: &'a dyn Fn(&ConditionalField) -> Result<crate::models::ConditionEmbedding>,
}

fn prepare_side<'a>(
    sched: &NoiseSchedule,
    z0: &[f64],
    eps: &[f64],
    t: Time,
    emb_of: &'a dyn Fn(&ConditionalField) -> Result<crate::models::ConditionEmbedding>,
) -> Result<Side<'a>> {
    Ok(Side {
        zt: sched.corrupt(z0, t, eps)?,
        target: sched.target(z0, eps)?,
        tn: sched.network_time(t),
        emb_of,
    })
}

fn side_mse(field: &ConditionalField, side: &Side) -> Result<f64> {
    let pred = field.evaluate(&side.zt, side.tn, &(side.emb_of)(field)?)?;
    let mut r = Vec::new();
    Ok(squared_residual(&side.target, &pred, &mut r))
}

/// Adds `coef · ∂m/∂θ` into `grad` and returns `m`.
fn side_mse_grad(field: &ConditionalField, side: &Side, coef: f64, grad: &mut [f64]) -> Result<f64> {
    let emb = (side.emb_of)(field)?;
    let pred = field.evaluate(&side.zt, side.tn, &emb)?;
    let mut r = Vec::new();
    let m = squared_residual(&side.target, &pred, &mut r);
    let upstream: Vec<f64> = r.iter().map(|ri| -2.0 * coef * ri).collect();
    field.accumulate_gradient(&side.zt, side.tn, &emb, &upstream, grad)?;
    Ok(m)
}

fn validate_pairs(d: usize, batch: &PairBatch, sched: &NoiseSchedule, t_scale: f64) -> Result<()> {
    if !(t_scale > 0.0 && t_scale.is_finite()) {
        return Err(Error::Config {
            path: "t_scale".into(),
            message: format!("must be positive and finite, got {t_scale}"),
        });
    }
    for r in &batch.records {
        check_sample_dims(d, &[&r.z0_plus, &r.z0_minus, &r.eps_plus, &r.eps_minus])?;
        sched.check_time(r.t)?;
    }
    Ok(())
}

const TERMS: usize = 6;

fn finish_terms(acc: &[f64], n: f64) -> Result<(f64, PairTerms)> {
    let loss = acc[0] / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("preference loss".into()));
    }
    Ok((
        loss,
        PairTerms {
            mse_plus_theta: acc[1] / n,
            mse_plus_ref: acc[2] / n,
            mse_minus_theta: acc[3] / n,
            mse_minus_ref: acc[4] / n,
            inner_argument: acc[5] / n,
        },
    ))
}

/// Single-model preference loss (the Diffusion-DPO baseline):
/// mean of −log σ(−T·[(m⁺_θ − m⁺_ref) − (m⁻_θ − m⁻_ref)]).
pub fn loss_dpo_single(
    theta: &ConditionalField,
    reference: &ConditionalField,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    t_scale: f64,
) -> Result<LossReport> {
    theta.same_shape(reference)?;
    theta.mode.matches(sched.kind)?;
    validate_pairs(theta.arch.data_dim, batch, sched, t_scale)?;
    let p = theta.param_count();
    if batch.records.is_empty() {
        return Ok(LossReport {
            loss: 0.0,
            terms: Some(PairTerms::default()),
            gradients: vec![vec![0.0; p]],
        });
    }
    let n = batch.records.len() as f64;
    let acc = reduce(batch.records.len(), TERMS + p, |i, acc| {
        let r = &batch.records[i];
        let emb_of = |f: &ConditionalField| f.embed(Some(r.cond));
        let minus_cond = (!r.drop_minus).then_some(r.cond);
        let emb_minus = |f: &ConditionalField| f.embed(minus_cond);
        let plus = prepare_side(sched, &r.z0_plus, &r.eps_plus, r.t, &emb_of)?;
        let minus = prepare_side(sched, &r.z0_minus, &r.eps_minus, r.t, &emb_minus)?;
        let mp_ref = side_mse(reference, &plus)?;
        let mm_ref = side_mse(reference, &minus)?;
        let mp = side_mse(theta, &plus)?;
        let mm = side_mse(theta, &minus)?;
        let inner = -t_scale * ((mp - mp_ref) - (mm - mm_ref));
        // d(−log σ(inner))/d inner = −σ(−inner); d inner/d m⁺ = −T, d inner/d m⁻ = +T
        let w = t_scale * sigmoid(-inner) / n;
        let g = &mut acc[TERMS..];
        side_mse_grad(theta, &plus, w, g)?;
        side_mse_grad(theta, &minus, -w, g)?;
        acc[0] += softplus(-inner);
        acc[1] += mp;
        acc[2] += mp_ref;
        acc[3] += mm;
        acc[4] += mm_ref;
        acc[5] += inner;
        Ok(())
    })?;
    let (loss, terms) = finish_terms(&acc, n)?;
    Ok(LossReport {
        loss,
        terms: Some(terms),
        gradients: vec![acc[TERMS..].to_vec()],
    })
}

/// CHATS loss with both trainable roles and anchored reference terms.
pub fn loss_chats(triple: &ModelTriple, batch: &PairBatch, sched: &NoiseSchedule, t_scale: f64) -> Result<LossReport> {
    loss_chats_with(
        triple,
        batch,
        sched,
        t_scale,
        ReferenceTerms::Anchored,
        &[Role::Preferred, Role::Dispreferred],
    )
}

/// Mean of −log σ(−T·[(m⁺_{θ⁺} − m⁺_ref) + (m⁻_{θ⁻} − m⁻_ref)]).
///
/// `wrt` selects which gradients to return; asking for [`Role::Reference`]
/// is an error.
pub fn loss_chats_with(
    triple: &ModelTriple,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    t_scale: f64,
    reference_terms: ReferenceTerms,
    wrt: &[Role],
) -> Result<LossReport> {
    if wrt.contains(&Role::Reference) {
        return Err(Error::FrozenReference);
    }
    let want_plus = wrt.contains(&Role::Preferred);
    let want_minus = wrt.contains(&Role::Dispreferred);
    let reference = triple.reference();
    triple.preferred.mode.matches(sched.kind)?;
    validate_pairs(reference.arch.data_dim, batch, sched, t_scale)?;
    let p = reference.param_count();
    let goff_minus = TERMS + if want_plus { p } else { 0 };
    let dim = goff_minus + if want_minus { p } else { 0 };
    let n = batch.records.len().max(1) as f64;
    let acc = reduce(batch.records.len(), dim, |i, acc| {
        let r = &batch.records[i];
        let emb_of = |f: &ConditionalField| f.embed(Some(r.cond));
        let minus_cond = (!r.drop_minus).then_some(r.cond);
        let emb_minus = |f: &ConditionalField| f.embed(minus_cond);
        let plus = prepare_side(sched, &r.z0_plus, &r.eps_plus, r.t, &emb_of)?;
        let minus = prepare_side(sched, &r.z0_minus, &r.eps_minus, r.t, &emb_minus)?;
        let mp = side_mse(&triple.preferred, &plus)?;
        let mm = side_mse(&triple.dispreferred, &minus)?;
        let (mp_ref, mm_ref) = match reference_terms {
            ReferenceTerms::Anchored => (side_mse(reference, &plus)?, side_mse(reference, &minus)?),
            ReferenceTerms::Dropped => (0.0, 0.0),
        };
        let inner = -t_scale * ((mp - mp_ref) + (mm - mm_ref));
        let w = t_scale * sigmoid(-inner) / n;
        let (head, tail) = acc.split_at_mut(goff_minus);
        if want_plus {
            side_mse_grad(&triple.preferred, &plus, w, &mut head[TERMS..])?;
        }
        if want_minus {
            side_mse_grad(&triple.dispreferred, &minus, w, tail)?;
        }
        acc[0] += softplus(-inner);
        acc[1] += mp;
        acc[2] += mp_ref;
        acc[3] += mm;
        acc[4] += mm_ref;
        acc[5] += inner;
        Ok(())
    })?;
    let (loss, terms) = if batch.records.is_empty() {
        (0.0, PairTerms::default())
    } else {
        finish_terms(&acc, n)?
    };
    let mut gradients = Vec::new();
    if want_plus {
        gradients.push(acc[TERMS..goff_minus].to_vec());
    }
    if want_minus {
        gradients.push(acc[goff_minus..].to_vec());
    }
    Ok(LossReport {
        loss,
        terms: Some(terms),
        gradients,
    })
}
