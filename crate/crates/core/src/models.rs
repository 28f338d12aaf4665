//! Conditional MLP fields ε_θ(z, t, c) / v_θ(z, t, c) with hand-written
//! reverse-mode gradients, learned condition and null embeddings, the proxy
//! embedding, and the preferred/dispreferred/reference triple.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::processes::ScheduleKind;

/// Layout version of the flat parameter vector.
pub const PARAM_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// How the condition embedding enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Embedding concatenated to the MLP input.
    Concat,
    /// `mlp(z, t) + W·emb`: the output is affine in the embedding.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    Epsilon,
    Velocity,
}

impl FieldMode {
    pub fn name(self) -> &'static str {
        match self {
            FieldMode::Epsilon => "epsilon",
            FieldMode::Velocity => "velocity",
        }
    }

    pub fn for_kind(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Diffusion => FieldMode::Epsilon,
            ScheduleKind::Flow => FieldMode::Velocity,
        }
    }

    pub fn matches(self, kind: ScheduleKind) -> Result<()> {
        if self != Self::for_kind(kind) {
            return Err(Error::ModeMismatch {
                mode: self.name(),
                kind: kind.name(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub num_conditions: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoidal frequencies; the network sees `2 * time_frequencies` time features.
    pub time_frequencies: usize,
    pub conditioning: Conditioning,
    #[serde(default)]
    pub zero_init_output: bool,
}

impl Architecture {
    pub fn mlp(data_dim: usize, cond_dim: usize, num_conditions: usize, hidden: Vec<usize>) -> Self {
        Self {
            data_dim,
            cond_dim,
            num_conditions,
            hidden,
            activation: Activation::Silu,
            time_frequencies: 4,
            conditioning: Conditioning::Concat,
            zero_init_output: false,
        }
    }

    fn time_dim(&self) -> usize {
        2 * self.time_frequencies
    }

    fn mlp_input_dim(&self) -> usize {
        let base = self.data_dim + self.time_dim();
        match self.conditioning {
            Conditioning::Concat => base + self.cond_dim,
            Conditioning::Additive => base,
        }
    }

    /// (fan_in, fan_out) for each dense layer, output layer last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.mlp_input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn table_len(&self) -> usize {
        self.num_conditions * self.cond_dim
    }

    fn null_offset(&self) -> usize {
        self.table_len()
    }

    fn layers_offset(&self) -> usize {
        self.table_len() + self.cond_dim
    }

    fn projection_offset(&self) -> usize {
        self.layers_offset()
            + self
                .layer_shapes()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        let proj = match self.conditioning {
            Conditioning::Concat => 0,
            Conditioning::Additive => self.data_dim * self.cond_dim,
        };
        self.projection_offset() + proj
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ArchitectureMismatch(m.to_string()));
        if self.data_dim == 0 {
            return bad("data_dim must be positive");
        }
        if self.cond_dim == 0 {
            return bad("cond_dim must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be nonempty with positive widths");
        }
        Ok(())
    }
}

/// Where an embedding came from; determines how its gradient is routed
/// back into the embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Condition(usize),
    Null,
    /// `-alpha * table[cond] + (1 + alpha) * null`.
    Proxy { cond: usize, alpha: f64 },
    /// Caller-supplied vector with no trainable origin.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl ConditionEmbedding {
    pub fn external(values: Vec<f64>) -> Self {
        Self {
            values,
            source: EmbeddingSource::External,
        }
    }
}

/// ĉ = −α·c + (1+α)·∅, tagged as a proxy.
pub fn make_proxy_embedding(
    c: &ConditionEmbedding,
    null: &ConditionEmbedding,
    alpha: f64,
) -> Result<ConditionEmbedding> {
    check_dim("make_proxy_embedding", c.values.len(), null.values.len())?;
    let values = c
        .values
        .iter()
        .zip(&null.values)
        .map(|(ci, ni)| -alpha * ci + (1.0 + alpha) * ni)
        .collect();
    let source = match (c.source, null.source) {
        (EmbeddingSource::Condition(cond), EmbeddingSource::Null) => EmbeddingSource::Proxy { cond, alpha },
        _ => EmbeddingSource::External,
    };
    Ok(ConditionEmbedding { values, source })
}

/// Anything that predicts noise or velocity from `(z, t, c)`. `t` is the
/// network time in `[0, 1]`.
pub trait Field: Sync {
    fn data_dim(&self) -> usize;
    fn mode(&self) -> FieldMode;
    fn embed(&self, cond: Option<usize>) -> Result<ConditionEmbedding>;
    fn evaluate(&self, z: &[f64], t: f64, c: &ConditionEmbedding) -> Result<Vec<f64>>;
}

/// A conditional MLP with a flat parameter vector.
///
/// Layout: condition table (`num_conditions × cond_dim`), null embedding,
/// dense layers in order (row-major weights then bias), and for
/// [`Conditioning::Additive`] the `data_dim × cond_dim` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalField {
    pub arch: Architecture,
    pub mode: FieldMode,
    pub params: Vec<f64>,
}

struct Tape {
    /// Input to each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl ConditionalField {
    pub fn new(arch: Architecture, mode: FieldMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let unit = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..arch.table_len() + arch.cond_dim {
            params.push(unit.sample(&mut rng));
        }
        let shapes = arch.layer_shapes();
        for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let last = li + 1 == shapes.len();
            let w = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            for _ in 0..fan_in * fan_out {
                params.push(if last && arch.zero_init_output {
                    0.0
                } else {
                    w.sample(&mut rng)
                });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        if arch.conditioning == Conditioning::Additive {
            let w = Normal::new(0.0, (1.0 / arch.cond_dim as f64).sqrt()).unwrap();
            for _ in 0..arch.data_dim * arch.cond_dim {
                params.push(if arch.zero_init_output { 0.0 } else { w.sample(&mut rng) });
            }
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Ok(Self { arch, mode, params })
    }

    pub fn from_params(arch: Architecture, mode: FieldMode, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_dim("parameter vector", arch.param_count(), params.len())?;
        Ok(Self { arch, mode, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Euclidean distance between two parameter vectors of the same architecture.
    pub fn distance(&self, other: &ConditionalField) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_shape(&self, other: &ConditionalField) -> Result<()> {
        if self.arch != other.arch || self.mode != other.mode {
            return Err(Error::ArchitectureMismatch(
                "fields differ in architecture or mode".into(),
            ));
        }
        Ok(())
    }

    fn time_features(&self, t: f64, out: &mut Vec<f64>) {
        for k in 0..self.arch.time_frequencies {
            let w = std::f64::consts::PI * (1u64 << k) as f64 * t;
            out.push(w.sin());
            out.push(w.cos());
        }
    }

    fn check_inputs(&self, z: &[f64], t: f64, c: &ConditionEmbedding) -> Result<()> {
        check_dim("field input z", self.arch.data_dim, z.len())?;
        check_dim("condition embedding", self.arch.cond_dim, c.values.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange {
                value: t,
                min: 0.0,
                max: 1.0,
            });
        }
        if z.iter().chain(&c.values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field input".into()));
        }
        Ok(())
    }

    fn forward(&self, z: &[f64], t: f64, c: &ConditionEmbedding, tape: Option<&mut Tape>) -> Vec<f64> {
        let arch = &self.arch;
        let mut x = Vec::with_capacity(arch.mlp_input_dim());
        x.extend_from_slice(z);
        self.time_features(t, &mut x);
        if arch.conditioning == Conditioning::Concat {
            x.extend_from_slice(&c.values);
        }
        let shapes = arch.layer_shapes();
        let mut offset = arch.layers_offset();
        let mut tape = tape;
        for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut y: Vec<f64> = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *yo += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            let last = li + 1 == shapes.len();
            let next = if last {
                y.clone()
            } else {
                y.iter().map(|&v| arch.activation.apply(v)).collect()
            };
            if let Some(tp) = tape.as_deref_mut() {
                tp.inputs.push(std::mem::take(&mut x));
                if !last {
                    tp.pre.push(y);
                }
            }
            x = next;
        }
        if arch.conditioning == Conditioning::Additive {
            let p = &self.params[arch.projection_offset()..];
            for (o, xo) in x.iter_mut().enumerate() {
                let row = &p[o * arch.cond_dim..(o + 1) * arch.cond_dim];
                *xo += row.iter().zip(&c.values).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        x
    }

    /// Forward pass, then adds `∂(upstream · output)/∂params` into `grad`.
    /// Returns the output.
    pub fn accumulate_gradient(
        &self,
        z: &[f64],
        t: f64,
        c: &ConditionEmbedding,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(z, t, c)?;
        check_dim("upstream", self.arch.data_dim, upstream.len())?;
        check_dim("gradient buffer", self.params.len(), grad.len())?;
        let arch = &self.arch;
        let mut tape = Tape {
            inputs: Vec::with_capacity(arch.hidden.len() + 1),
            pre: Vec::with_capacity(arch.hidden.len()),
        };
        let out = self.forward(z, t, c, Some(&mut tape));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field output".into()));
        }

        let mut d_emb = vec![0.0; arch.cond_dim];
        if arch.conditioning == Conditioning::Additive {
            let off = arch.projection_offset();
            for (o, &u) in upstream.iter().enumerate() {
                for (k, &e) in c.values.iter().enumerate() {
                    grad[off + o * arch.cond_dim + k] += u * e;
                    d_emb[k] += u * self.params[off + o * arch.cond_dim + k];
                }
            }
        }

        let shapes = arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = arch.layers_offset();
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let mut delta = upstream.to_vec();
        for li in (0..shapes.len()).rev() {
            let (fan_in, _fan_out) = shapes[li];
            let off = offsets[li];
            let input = &tape.inputs[li];
            let w_len = fan_in * delta.len();
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[off + w_len + o] += d;
            }
            let mut d_in = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[off + o * fan_in..off + (o + 1) * fan_in];
                for (di, wi) in d_in.iter_mut().zip(row) {
                    *di += d * wi;
                }
            }
            if li > 0 {
                let pre = &tape.pre[li - 1];
                for (di, &p) in d_in.iter_mut().zip(pre) {
                    *di *= arch.activation.derivative(p);
                }
            } else if arch.conditioning == Conditioning::Concat {
                let start = arch.data_dim + arch.time_dim();
                for (k, de) in d_emb.iter_mut().enumerate() {
                    *de += d_in[start + k];
                }
            }
            delta = d_in;
        }

        let cd = arch.cond_dim;
        let mut scatter = |row_off: usize, w: f64| {
            for (k, de) in d_emb.iter().enumerate() {
                grad[row_off + k] += w * de;
            }
        };
        match c.source {
            EmbeddingSource::Condition(i) => scatter(i * cd, 1.0),
            EmbeddingSource::Null => scatter(arch.null_offset(), 1.0),
            EmbeddingSource::Proxy { cond, alpha } => {
                scatter(cond * cd, -alpha);
                scatter(arch.null_offset(), 1.0 + alpha);
            }
            EmbeddingSource::External => {}
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(out)
    }

    /// Output and `∂(upstream · output)/∂params`, aligned with `params`.
    pub fn evaluate_with_gradients(
        &self,
        z: &[f64],
        t: f64,
        c: &ConditionEmbedding,
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let out = self.accumulate_gradient(z, t, c, upstream, &mut grad)?;
        Ok((out, grad))
    }
}

impl Field for ConditionalField {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn mode(&self) -> FieldMode {
        self.mode
    }

    fn embed(&self, cond: Option<usize>) -> Result<ConditionEmbedding> {
        let cd = self.arch.cond_dim;
        match cond {
            Some(i) if i >= self.arch.num_conditions => Err(Error::UnknownCondition(i)),
            Some(i) => Ok(ConditionEmbedding {
                values: self.params[i * cd..(i + 1) * cd].to_vec(),
                source: EmbeddingSource::Condition(i),
            }),
            None => {
                let o = self.arch.null_offset();
                Ok(ConditionEmbedding {
                    values: self.params[o..o + cd].to_vec(),
                    source: EmbeddingSource::Null,
                })
            }
        }
    }

    fn evaluate(&self, z: &[f64], t: f64, c: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.check_inputs(z, t, c)?;
        let out = self.forward(z, t, c, None);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field output".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Preferred,
    Dispreferred,
    Reference,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Preferred => "preferred",
            Role::Dispreferred => "dispreferred",
            Role::Reference => "reference",
        }
    }
}

/// Preferred θ⁺, dispreferred θ⁻, and the frozen reference they start from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriple {
    pub preferred: ConditionalField,
    pub dispreferred: ConditionalField,
    reference: ConditionalField,
}

impl ModelTriple {
    pub fn from_parts(
        preferred: ConditionalField,
        dispreferred: ConditionalField,
        reference: ConditionalField,
    ) -> Result<Self> {
        preferred.same_shape(&reference)?;
        dispreferred.same_shape(&reference)?;
        Ok(Self {
            preferred,
            dispreferred,
            reference,
        })
    }

    pub fn reference(&self) -> &ConditionalField {
        &self.reference
    }

    pub fn field(&self, role: Role) -> &ConditionalField {
        match role {
            Role::Preferred => &self.preferred,
            Role::Dispreferred => &self.dispreferred,
            Role::Reference => &self.reference,
        }
    }

    pub fn field_mut(&mut self, role: Role) -> Result<&mut ConditionalField> {
        match role {
            Role::Preferred => Ok(&mut self.preferred),
            Role::Dispreferred => Ok(&mut self.dispreferred),
            Role::Reference => Err(Error::FrozenReference),
        }
    }
}

/// Deep-copies `base` into θ⁺, θ⁻ and a frozen reference.
pub fn clone_as_triple(base: &ConditionalField) -> Result<ModelTriple> {
    if !base.is_finite() {
        return Err(Error::NonFinite("base parameters".into()));
    }
    Ok(ModelTriple {
        preferred: base.clone(),
        dispreferred: base.clone(),
        reference: base.clone(),
    })
}
