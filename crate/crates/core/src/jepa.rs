//! The recurrent JEPA model and the fully linear testbed.
//!
//! A patch sequence `x(1..T)` is featurised by a frozen linear map, driven
//! through one RGC area, and embedded as `h(t) = E · s(t)`. The predictor
//! maps `h(t−1)` to `ĥ(t)`; the loss compares `ĥ(t)` with the target `h(t)`
//! for `t = 2..T`, so a sequence of `T` patches yields `T − 1` loss terms.
//! With `stop_gradient` set the target is a constant for differentiation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{
    rgc_step, time_decay_step, GateActivation, RgcGates, RgcState, RgcWeights, TimeDecayParams,
    GATE_NAMES,
};
use crate::error::{shape, Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};
use crate::rfp::{generic_two_point_update, GenericSensitivity};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Squared,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Linear,
    Mlp,
}

/// Representation predictor `G`.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Linear { g: Matrix },
    /// `ĥ = W2 · tanh(W1 h + b1) + b2`; biases are column matrices.
    Mlp {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    },
}

/// Hidden activations kept for the backward pass of the MLP predictor.
#[derive(Clone, Debug, Default)]
pub struct PredictorCache {
    hidden: Vec<f64>,
}

impl Predictor {
    pub fn identity(d: usize) -> Self {
        Predictor::Linear {
            g: Matrix::identity(d),
        }
    }

    /// Near-identity MLP: paired units `tanh(±ε h)` recombined by `±1/2ε`,
    /// plus a small random perturbation. Requires `width ≥ 2d`.
    pub fn near_identity_mlp(d: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if width < 2 * d {
            return Err(Error::Validation(format!(
                "mlp width {width} is below 2·d_h = {}",
                2 * d
            )));
        }
        const EPS: f64 = 0.1;
        const JITTER: f64 = 1e-3;
        let mut w1 = Matrix::random_normal(width, d, JITTER, rng);
        let mut w2 = Matrix::random_normal(d, width, JITTER, rng);
        for i in 0..d {
            w1[(i, i)] += EPS;
            w1[(d + i, i)] -= EPS;
            w2[(i, i)] += 0.5 / EPS;
            w2[(i, d + i)] -= 0.5 / EPS;
        }
        for r in 2 * d..width {
            for c in 0..d {
                w1[(r, c)] = rng.normal() / (d as f64).sqrt();
            }
        }
        Ok(Predictor::Mlp {
            w1,
            b1: Matrix::zeros(width, 1),
            w2,
            b2: Matrix::zeros(d, 1),
        })
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Linear { .. } => PredictorKind::Linear,
            Predictor::Mlp { .. } => PredictorKind::Mlp,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Predictor::Linear { g } => g.rows(),
            Predictor::Mlp { w2, .. } => w2.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Predictor::Linear { g } => g.cols(),
            Predictor::Mlp { w1, .. } => w1.cols(),
        }
    }

    pub fn forward(&self, h: &[f64]) -> Result<(Vec<f64>, PredictorCache)> {
        match self {
            Predictor::Linear { g } => Ok((g.matvec(h)?, PredictorCache::default())),
            Predictor::Mlp { w1, b1, w2, b2 } => {
                let hidden: Vec<f64> = w1
                    .matvec(h)?
                    .iter()
                    .zip(b1.data())
                    .map(|(z, b)| (z + b).tanh())
                    .collect();
                let out = w2
                    .matvec(&hidden)?
                    .iter()
                    .zip(b2.data())
                    .map(|(o, b)| o + b)
                    .collect();
                Ok((out, PredictorCache { hidden }))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (same block order as
    /// [`Predictor::blocks`]) and returns `∂/∂h`.
    pub fn backward(
        &self,
        h: &[f64],
        cache: &PredictorCache,
        d_out: &[f64],
        grads: &mut [Matrix],
    ) -> Result<Vec<f64>> {
        match self {
            Predictor::Linear { g } => {
                grads[0].add_outer(1.0, d_out, h)?;
                g.matvec_t(d_out)
            }
            Predictor::Mlp { w1, w2, .. } => {
                let hid = &cache.hidden;
                grads[2].add_outer(1.0, d_out, hid)?;
                grads[3].axpy(1.0, &Matrix::column(d_out))?;
                let d_hidden = w2.matvec_t(d_out)?;
                let d_pre: Vec<f64> = d_hidden
                    .iter()
                    .zip(hid)
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                grads[0].add_outer(1.0, &d_pre, h)?;
                grads[1].axpy(1.0, &Matrix::column(&d_pre))?;
                w1.matvec_t(&d_pre)
            }
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Predictor::Linear { g } => vec![("pred.g", g)],
            Predictor::Mlp { w1, b1, w2, b2 } => vec![
                ("pred.w1", w1),
                ("pred.b1", b1),
                ("pred.w2", w2),
                ("pred.b2", b2),
            ],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Predictor::Linear { g } => vec![g],
            Predictor::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.blocks()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

/// Construction knobs for [`JepaModel::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JepaConfig {
    pub patch_dim: usize,
    /// RGC width `n` (also the featuriser output dimension).
    pub n: usize,
    pub d_h: usize,
    pub predictor: PredictorKind,
    /// Hidden width of the MLP predictor; defaults to `2·d_h`.
    pub mlp_width: Option<usize>,
    pub stop_gradient: bool,
    pub loss: LossKind,
    pub lambda1: f64,
    pub diagonal_gates: bool,
    pub activation: GateActivation,
    /// Row norm of the frozen featuriser.
    pub featurizer_scale: f64,
}

impl Default for JepaConfig {
    fn default() -> Self {
        Self {
            patch_dim: 256,
            n: 120,
            d_h: 120,
            predictor: PredictorKind::Linear,
            mlp_width: None,
            stop_gradient: true,
            loss: LossKind::Squared,
            lambda1: 1.0,
            diagonal_gates: true,
            activation: GateActivation::Tanh,
            featurizer_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JepaModel {
    /// Frozen patch → `n` map.
    pub featurizer: Matrix,
    pub rgc: RgcWeights,
    pub embed: Matrix,
    pub predictor: Predictor,
    pub stop_gradient: bool,
    pub loss: LossKind,
    pub lambda1: f64,
}

/// Gradients with the same block structure as the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct JepaGrads {
    pub gates: [Matrix; 4],
    pub embed: Matrix,
    pub predictor: Vec<Matrix>,
}

impl JepaGrads {
    pub fn zeros_like(model: &JepaModel) -> Self {
        let n = model.rgc.n();
        Self {
            gates: std::array::from_fn(|_| Matrix::zeros(n, n)),
            embed: Matrix::zeros(model.embed.rows(), model.embed.cols()),
            predictor: model.predictor.zero_grads(),
        }
    }

    pub fn blocks(&self) -> Vec<&Matrix> {
        self.gates
            .iter()
            .chain(std::iter::once(&self.embed))
            .chain(&self.predictor)
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.gates
            .iter_mut()
            .chain(std::iter::once(&mut self.embed))
            .chain(self.predictor.iter_mut())
            .collect()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &JepaGrads) -> Result<()> {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks_mut().into_iter().for_each(|m| m.scale_in_place(s));
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Zeroes off-diagonal gate entries, matching a diagonal-gate
    /// parameterisation.
    pub fn mask_offdiagonal_gates(&mut self) {
        for g in &mut self.gates {
            let n = g.rows();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        g[(i, j)] = 0.0;
                    }
                }
            }
        }
    }
}

/// Trajectory of one encoded sequence. `states[0]` is the zero initial
/// state; `states[t]`, `gates[t − 1]`, `xs[t − 1]` and `h[t − 1]` belong to
/// step `t`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub xs: Vec<Vec<f64>>,
    pub states: Vec<RgcState>,
    pub gates: Vec<RgcGates>,
    pub h: Vec<Vec<f64>>,
}

impl Encoded {
    /// Reals held for a reverse sweep: states, gates, inputs, embeddings.
    pub fn stored_reals(&self) -> usize {
        let n = self.states.first().map_or(0, RgcState::n);
        self.states.len() * 2 * n
            + self.gates.len() * 4 * n
            + self.xs.iter().map(Vec::len).sum::<usize>()
            + self.h.iter().map(Vec::len).sum::<usize>()
    }
}

/// Loss value with derivatives for both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub d_pred: Vec<f64>,
    pub d_target: Vec<f64>,
}

/// Squared: `½λ₁‖h − ĥ‖²`. Cosine: `1 − ⟨h, ĥ⟩ / (‖h‖‖ĥ‖)`.
pub fn jepa_loss(h_target: &[f64], h_pred: &[f64], kind: LossKind, lambda1: f64) -> Result<LossEval> {
    if h_target.len() != h_pred.len() {
        return Err(shape(
            "jepa_loss",
            format!("{} vs {}", h_target.len(), h_pred.len()),
        ));
    }
    match kind {
        LossKind::Squared => {
            let diff: Vec<f64> = h_target.iter().zip(h_pred).map(|(a, b)| a - b).collect();
            let loss = 0.5 * lambda1 * dot(&diff, &diff);
            let d_pred = diff.iter().map(|d| -lambda1 * d).collect();
            let d_target = diff.iter().map(|d| lambda1 * d).collect();
            Ok(LossEval {
                loss,
                d_pred,
                d_target,
            })
        }
        LossKind::Cosine => {
            let (nt, np) = (norm(h_target), norm(h_pred));
            if nt == 0.0 || np == 0.0 {
                return Err(Error::Numeric("cosine loss on a zero-norm vector".into()));
            }
            let cos = dot(h_target, h_pred) / (nt * np);
            let d = |a: &[f64], b: &[f64], na: f64, nb: f64| -> Vec<f64> {
                // ∂(−cos)/∂b
                a.iter()
                    .zip(b)
                    .map(|(ai, bi)| -(ai / (na * nb) - cos * bi / (nb * nb)))
                    .collect()
            };
            Ok(LossEval {
                loss: 1.0 - cos,
                d_pred: d(h_target, h_pred, nt, np),
                d_target: d(h_pred, h_target, np, nt),
            })
        }
    }
}

impl JepaModel {
    pub fn init(cfg: &JepaConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.n == 0 || cfg.d_h == 0 || cfg.patch_dim == 0 {
            return Err(Error::Validation("model dimensions must be positive".into()));
        }
        let featurizer = if cfg.n <= cfg.patch_dim {
            Matrix::random_orthogonal(cfg.n, cfg.patch_dim, rng)
        } else {
            Matrix::random_normal(cfg.n, cfg.patch_dim, 1.0 / (cfg.patch_dim as f64).sqrt(), rng)
        }
        .scale(cfg.featurizer_scale);
        let embed = Matrix::random_orthogonal(cfg.d_h, cfg.n, rng);
        let predictor = match cfg.predictor {
            PredictorKind::Linear => Predictor::identity(cfg.d_h),
            PredictorKind::Mlp => {
                Predictor::near_identity_mlp(cfg.d_h, cfg.mlp_width.unwrap_or(2 * cfg.d_h), rng)?
            }
        };
        Ok(Self {
            featurizer,
            rgc: RgcWeights::zeros(cfg.n, cfg.diagonal_gates).with_activation(cfg.activation),
            embed,
            predictor,
            stop_gradient: cfg.stop_gradient,
            loss: cfg.loss,
            lambda1: cfg.lambda1,
        })
    }

    pub fn n(&self) -> usize {
        self.rgc.n()
    }

    pub fn d_h(&self) -> usize {
        self.embed.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.featurizer.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.rgc.check()?;
        let n = self.n();
        if self.featurizer.rows() != n || self.embed.cols() != n {
            return Err(shape(
                "JepaModel",
                format!(
                    "featurizer {:?}, embed {:?} for n={n}",
                    self.featurizer.shape(),
                    self.embed.shape()
                ),
            ));
        }
        let d = self.d_h();
        if self.predictor.input_dim() != d || self.predictor.output_dim() != d {
            return Err(shape("JepaModel", "predictor does not map d_h to d_h"));
        }
        Ok(())
    }

    /// Trainable blocks: four gate matrices, embedding, predictor blocks.
    pub fn trainable_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self
            .rgc
            .matrices()
            .iter()
            .zip(GATE_NAMES)
            .map(|(m, name)| (format!("rgc.{name}"), m))
            .collect();
        out.push(("embed".into(), &self.embed));
        out.extend(self.predictor.blocks().into_iter().map(|(n, m)| (n.to_string(), m)));
        out
    }

    pub fn trainable_blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.rgc.matrices_mut().iter_mut().collect();
        out.push(&mut self.embed);
        out.extend(self.predictor.blocks_mut());
        out
    }

    pub fn featurize(&self, patch: &[f64]) -> Result<Vec<f64>> {
        self.featurizer.matvec(patch)
    }

    pub fn predict_next(&self, h_t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predictor.forward(h_t)?.0)
    }

    /// Loss of predicting `target` from `context`, with derivatives for both.
    pub fn step_loss(&self, context: &[f64], target: &[f64]) -> Result<(LossEval, PredictorCache, Vec<f64>)> {
        let (pred, cache) = self.predictor.forward(context)?;
        let eval = jepa_loss(target, &pred, self.loss, self.lambda1)?;
        Ok((eval, cache, pred))
    }
}

/// Runs the encoder from the zero state over a patch sequence.
pub fn encode_sequence(model: &JepaModel, patches: &[Vec<f64>]) -> Result<Encoded> {
    let n = model.n();
    let mut states = Vec::with_capacity(patches.len() + 1);
    let mut gates = Vec::with_capacity(patches.len());
    let mut xs = Vec::with_capacity(patches.len());
    let mut h = Vec::with_capacity(patches.len());
    states.push(RgcState::zeros(n));
    for patch in patches {
        if patch.len() != model.patch_dim() {
            return Err(shape(
                "encode_sequence",
                format!("patch of {} for featurizer {:?}", patch.len(), model.featurizer.shape()),
            ));
        }
        let x = model.featurize(patch)?;
        let (next, g) = rgc_step(states.last().unwrap(), &x, &model.rgc)?;
        h.push(model.embed.matvec(&next.s)?);
        states.push(next);
        gates.push(g);
        xs.push(x);
    }
    Ok(Encoded { xs, states, gates, h })
}

/// Per-step losses `L(t)`, `t = 2..=T`, of one encoded sequence.
pub fn sequence_losses(model: &JepaModel, enc: &Encoded) -> Result<Vec<f64>> {
    (1..enc.h.len())
        .map(|t| Ok(model.step_loss(&enc.h[t - 1], &enc.h[t])?.0.loss))
        .collect()
}

/// Spatial backprop of one loss term through predictor and embedding.
#[derive(Clone, Debug)]
pub struct TermBackward {
    pub loss: f64,
    /// Chain factor applied to this term.
    pub weight: f64,
    /// `∂(weight · L)/∂s` at the context time.
    pub ds_context: Vec<f64>,
    /// Same at the target time; `None` under stop-gradient.
    pub ds_target: Option<Vec<f64>>,
}

/// Evaluates the term predicting `h_tgt` from `h_ctx`, asks `weight` for
/// the chain factor given the loss value, and accumulates the scaled
/// embedding and predictor gradients into `grads`.
pub fn loss_term_backward(
    model: &JepaModel,
    s_ctx: &[f64],
    s_tgt: &[f64],
    h_ctx: &[f64],
    h_tgt: &[f64],
    weight: impl FnOnce(f64) -> f64,
    grads: &mut JepaGrads,
) -> Result<TermBackward> {
    let (eval, cache, _) = model.step_loss(h_ctx, h_tgt)?;
    let w = weight(eval.loss);
    let d_pred: Vec<f64> = eval.d_pred.iter().map(|v| w * v).collect();
    let dh_ctx = model
        .predictor
        .backward(h_ctx, &cache, &d_pred, &mut grads.predictor)?;
    grads.embed.add_outer(1.0, &dh_ctx, s_ctx)?;
    let ds_context = model.embed.matvec_t(&dh_ctx)?;
    let ds_target = if model.stop_gradient {
        None
    } else {
        let d_tgt: Vec<f64> = eval.d_target.iter().map(|v| w * v).collect();
        grads.embed.add_outer(1.0, &d_tgt, s_tgt)?;
        Some(model.embed.matvec_t(&d_tgt)?)
    };
    Ok(TermBackward {
        loss: eval.loss,
        weight: w,
        ds_context,
        ds_target,
    })
}

/// Copy whose gates are evaluated as dense matrices. At a diagonal point
/// the forward map is unchanged, but derivatives with respect to the
/// off-diagonal entries become available.
pub fn dense_view(model: &JepaModel) -> JepaModel {
    let mut out = model.clone();
    out.rgc = RgcWeights::new(model.rgc.matrices().clone(), false, model.rgc.activation())
        .expect("shapes already validated");
    out
}

pub fn write_checkpoint(model: &JepaModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<JepaModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RJPW1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layout (little-endian): magic `RJPW1`, u16 version, u8 flags, f64 λ₁,
/// u32 block count, then per block u16 name length, name bytes, u32 rows,
/// u32 cols and rows·cols f64 values; trailing CRC-32 over everything
/// between the magic and the checksum.
///
/// Flag bits: 0 diagonal gates, 1 stop-gradient, 2 cosine loss, 3 MLP
/// predictor, 4 logistic gates.
pub fn encode_checkpoint(model: &JepaModel) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut flags = 0u8;
    flags |= model.rgc.diagonal_gates() as u8;
    flags |= (model.stop_gradient as u8) << 1;
    flags |= ((model.loss == LossKind::Cosine) as u8) << 2;
    flags |= ((model.predictor.kind() == PredictorKind::Mlp) as u8) << 3;
    flags |= ((model.rgc.activation() == GateActivation::Logistic) as u8) << 4;
    body.push(flags);
    body.extend_from_slice(&model.lambda1.to_le_bytes());
    let mut blocks: Vec<(String, &Matrix)> = vec![("featurizer".into(), &model.featurizer)];
    blocks.extend(model.trainable_blocks());
    body.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        body.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<JepaModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    if bytes.len() < 9 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated checkpoint".into(),
        });
    }
    let body_end = bytes.len() - 4;
    let mut cur = Cursor {
        buf: &bytes[..body_end],
        pos: 5,
    };
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 5,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let flags = cur.take(1, "flags")?[0];
    let lambda1 = cur.f64("lambda1")?;
    let count = cur.u32("block count")? as usize;
    let mut blocks: Vec<(String, Matrix)> = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = cur.u16("block name length")? as usize;
        let name_off = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "block name")?)
            .map_err(|_| Error::Format {
                offset: name_off as u64,
                msg: "block name is not UTF-8".into(),
            })?
            .to_string();
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let len = rows.checked_mul(cols).and_then(|v| v.checked_mul(8)).ok_or(Error::Format {
            offset: cur.pos as u64,
            msg: "block dimensions overflow".into(),
        })?;
        let raw = cur.take(len, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((name, Matrix::new(rows, cols, data)?));
    }
    if cur.pos != body_end {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: "trailing bytes before checksum".into(),
        });
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[5..body_end]) != stored {
        return Err(Error::Format {
            offset: body_end as u64,
            msg: "checksum mismatch".into(),
        });
    }

    let mut take = |name: &str| -> Result<Matrix> {
        let pos = blocks.iter().position(|(n, _)| n == name).ok_or(Error::Format {
            offset: 0,
            msg: format!("missing block {name}"),
        })?;
        Ok(blocks.remove(pos).1)
    };
    let featurizer = take("featurizer")?;
    let gates = [take("rgc.ss")?, take("rgc.ms")?, take("rgc.mm")?, take("rgc.sm")?];
    let activation = if flags & 0x10 != 0 {
        GateActivation::Logistic
    } else {
        GateActivation::Tanh
    };
    let rgc = RgcWeights::new(gates, flags & 1 != 0, activation)?;
    let embed = take("embed")?;
    let predictor = if flags & 0x08 != 0 {
        Predictor::Mlp {
            w1: take("pred.w1")?,
            b1: take("pred.b1")?,
            w2: take("pred.w2")?,
            b2: take("pred.b2")?,
        }
    } else {
        Predictor::Linear { g: take("pred.g")? }
    };
    let model = JepaModel {
        featurizer,
        rgc,
        embed,
        predictor,
        stop_gradient: flags & 2 != 0,
        loss: if flags & 4 != 0 {
            LossKind::Cosine
        } else {
            LossKind::Squared
        },
        lambda1,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Linear testbed
// ---------------------------------------------------------------------------

/// How the top input `c_N(t)` is normalised before the embedding layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopNormalization {
    /// Batch whitening to identity covariance.
    #[default]
    Whiten,
    /// Per-sample `‖c_N(t)‖² = 1`.
    UnitNorm,
    None,
}

/// Fully linear system: a time-decay stack whose last layer is the
/// embedding `h = c_{N+1}`, a linear predictor `ĥ(t) = W_Gh h(t−1) + W_Ga
/// W_A c^Low(t−1)`, and loss `½ E_t[λ₁‖h(t) − ĥ(t)‖² + λ₂‖a(t) − â(t)‖²]`.
///
/// The lower `N` layers are frozen; the top layer's input map is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTestbed {
    /// Layers `1..=N+1`; the last one produces `h`.
    pub encoder: TimeDecayParams,
    pub normalization: TopNormalization,
    pub w_gh: Matrix,
    pub w_ga: Matrix,
    pub w_a: Matrix,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
}

/// Knobs for [`LinearTestbed::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedConfig {
    pub input_dim: usize,
    /// Widths of the frozen lower layers `1..=N`.
    pub lower_dims: Vec<usize>,
    pub lower_tau: f64,
    pub d_h: usize,
    pub top_tau: f64,
    pub d_a: usize,
    pub init_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
    pub normalization: TopNormalization,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            lower_dims: vec![8],
            lower_tau: 0.2,
            d_h: 6,
            top_tau: 0.01,
            d_a: 2,
            init_scale: 0.01,
            lambda1: 1.0,
            lambda2: 0.0,
            eta: 0.01,
            normalization: TopNormalization::Whiten,
        }
    }
}

impl LinearTestbed {
    pub fn init(cfg: &TestbedConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.lower_dims.is_empty() {
            return Err(Error::Validation("testbed needs at least one lower layer".into()));
        }
        let mut tau = Vec::new();
        let mut p = Vec::new();
        let mut prev = cfg.input_dim;
        for &d in &cfg.lower_dims {
            tau.push(cfg.lower_tau);
            p.push(Matrix::random_normal(d, prev, 1.0 / (prev as f64).sqrt(), rng));
            prev = d;
        }
        tau.push(cfg.top_tau);
        p.push(Matrix::random_normal(cfg.d_h, prev, cfg.init_scale, rng));
        let encoder = TimeDecayParams::new(tau, p)?;
        let d_low: usize = cfg.lower_dims.iter().sum();
        Ok(Self {
            encoder,
            normalization: cfg.normalization,
            w_gh: Matrix::random_normal(cfg.d_h, cfg.d_h, cfg.init_scale, rng),
            w_ga: Matrix::random_normal(cfg.d_h, cfg.d_a, cfg.init_scale, rng),
            w_a: Matrix::random_normal(cfg.d_a, d_low, 1.0 / (d_low as f64).sqrt(), rng),
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            eta: cfg.eta,
        })
    }

    pub fn d_h(&self) -> usize {
        self.w_gh.rows()
    }

    pub fn top(&self) -> (&Matrix, f64) {
        let l = self.encoder.layers() - 1;
        (&self.encoder.p[l], self.encoder.tau[l])
    }

    pub fn top_mut(&mut self) -> &mut Matrix {
        let l = self.encoder.layers() - 1;
        &mut self.encoder.p[l]
    }

    fn lower(&self) -> Result<TimeDecayParams> {
        let l = self.encoder.layers() - 1;
        TimeDecayParams::new(self.encoder.tau[..l].to_vec(), self.encoder.p[..l].to_vec())
    }
}

/// Lower-stack activity of a testbed over a batch of sequences. Does not
/// depend on trainable parameters, so it is computed once per dataset.
#[derive(Clone, Debug)]
pub struct LowerRollout {
    /// `c_low[seq][t]` = concatenation `[c_1(t), …, c_N(t)]`.
    pub c_low: Vec<Vec<Vec<f64>>>,
    /// Normalised top inputs `ĉ_N(t)`.
    pub top_input: Vec<Vec<Vec<f64>>>,
}

pub fn rollout_lower(tb: &LinearTestbed, sequences: &[Vec<Vec<f64>>]) -> Result<LowerRollout> {
    let lower = tb.lower()?;
    let mut c_low = Vec::with_capacity(sequences.len());
    let mut raw_top = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut state = lower.zero_state();
        let mut lows = Vec::with_capacity(seq.len());
        let mut tops = Vec::with_capacity(seq.len());
        for x in seq {
            state = time_decay_step(&state, x, &lower)?;
            lows.push(state.iter().flatten().copied().collect::<Vec<f64>>());
            tops.push(state.last().unwrap().clone());
        }
        c_low.push(lows);
        raw_top.push(tops);
    }
    let top_input = match tb.normalization {
        TopNormalization::None => raw_top,
        TopNormalization::UnitNorm => raw_top
            .into_iter()
            .map(|seq| {
                seq.into_iter()
                    .map(|v| {
                        let nv = norm(&v);
                        if nv > 0.0 {
                            v.iter().map(|x| x / nv).collect()
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect(),
        TopNormalization::Whiten => whiten(&raw_top)?,
    };
    Ok(LowerRollout { c_low, top_input })
}

/// Symmetric whitening `Σ^{-1/2}` of the (uncentred) second moment.
fn whiten(seqs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = seqs
        .iter()
        .flatten()
        .next()
        .map_or(0, Vec::len);
    let mut m = Matrix::zeros(d, d);
    let mut count = 0usize;
    for v in seqs.iter().flatten() {
        m.add_outer(1.0, v, v)?;
        count += 1;
    }
    if count == 0 {
        return Ok(seqs.to_vec());
    }
    m.scale_in_place(1.0 / count as f64);
    let (vals, vecs) = crate::numerics::sym_eig(&m)?;
    let floor = vals.first().copied().unwrap_or(0.0) * 1e-12;
    let inv_sqrt: Vec<f64> = vals
        .iter()
        .map(|l| if *l > floor && *l > 0.0 { 1.0 / l.sqrt() } else { 0.0 })
        .collect();
    let w = vecs
        .matmul(&Matrix::diag(&inv_sqrt))?
        .matmul(&vecs.transpose())?;
    seqs.iter()
        .map(|seq| seq.iter().map(|v| w.matvec(v)).collect())
        .collect()
}

/// Embedding trajectories `h[seq][t]` produced by the top layer.
pub fn rollout_top(tb: &LinearTestbed, lower: &LowerRollout) -> Result<Vec<Vec<Vec<f64>>>> {
    let (p, tau) = tb.top();
    lower
        .top_input
        .iter()
        .map(|seq| {
            let mut h = vec![0.0; p.rows()];
            seq.iter()
                .map(|u| {
                    let drive = p.matvec(u)?;
                    h = h.iter().zip(&drive).map(|(a, b)| tau * a + b).collect();
                    Ok(h.clone())
                })
                .collect()
        })
        .collect()
}

/// Second moments over consecutive pairs `(t−1, t)`, `t = 2..=T`, pooled
/// across sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TestbedMoments {
    /// `E[h(t−1) h(t−1)ᵀ]`
    pub r0: Matrix,
    /// `E[h(t) h(t−1)ᵀ]`
    pub r1: Matrix,
    /// `E[c^Low(t−1) c^Low(t−1)ᵀ]`
    pub r_clow: Matrix,
    /// `E[h(t) c^Low(t−1)ᵀ]`
    pub h_next_clow: Matrix,
    /// `E[h(t−1) c^Low(t−1)ᵀ]`
    pub h_clow: Matrix,
    pub pairs: usize,
}

/// Size of the lagged third moment `E[h(t−1) ⊗ h(t−1) ⊗ h(t)]` (Frobenius),
/// relative to `E‖h‖²^{3/2}`. Stands in for the neglected `Y` term of the
/// balance argument; zero for any symmetric `h` distribution.
pub fn lagged_third_moment(h: &[Vec<Vec<f64>>]) -> f64 {
    let d = h.iter().flatten().next().map_or(0, Vec::len);
    let mut m3 = vec![0.0; d * d * d];
    let (mut sq, mut pairs) = (0.0, 0usize);
    for seq in h {
        for w in seq.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            for i in 0..d {
                for j in 0..d {
                    let aij = a[i] * a[j];
                    let row = &mut m3[(i * d + j) * d..(i * d + j + 1) * d];
                    for (r, bk) in row.iter_mut().zip(b) {
                        *r += aij * bk;
                    }
                }
            }
            sq += a.iter().map(|x| x * x).sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 || sq == 0.0 {
        return 0.0;
    }
    let p = pairs as f64;
    let norm = m3.iter().map(|x| (x / p).powi(2)).sum::<f64>().sqrt();
    norm / (sq / p).powf(1.5)
}

pub fn testbed_moments(h: &[Vec<Vec<f64>>], c_low: &[Vec<Vec<f64>>]) -> Result<TestbedMoments> {
    let dh = h.iter().flatten().next().map_or(0, Vec::len);
    let dl = c_low.iter().flatten().next().map_or(0, Vec::len);
    let mut mo = TestbedMoments {
        r0: Matrix::zeros(dh, dh),
        r1: Matrix::zeros(dh, dh),
        r_clow: Matrix::zeros(dl, dl),
        h_next_clow: Matrix::zeros(dh, dl),
        h_clow: Matrix::zeros(dh, dl),
        pairs: 0,
    };
    for (hs, cs) in h.iter().zip(c_low) {
        for t in 1..hs.len() {
            mo.r0.add_outer(1.0, &hs[t - 1], &hs[t - 1])?;
            mo.r1.add_outer(1.0, &hs[t], &hs[t - 1])?;
            mo.r_clow.add_outer(1.0, &cs[t - 1], &cs[t - 1])?;
            mo.h_next_clow.add_outer(1.0, &hs[t], &cs[t - 1])?;
            mo.h_clow.add_outer(1.0, &hs[t - 1], &cs[t - 1])?;
            mo.pairs += 1;
        }
    }
    if mo.pairs > 0 {
        let s = 1.0 / mo.pairs as f64;
        for m in [
            &mut mo.r0,
            &mut mo.r1,
            &mut mo.r_clow,
            &mut mo.h_next_clow,
            &mut mo.h_clow,
        ] {
            m.scale_in_place(s);
        }
    }
    Ok(mo)
}

/// Gradients of the representation loss with respect to the predictor maps:
///
/// ```text
/// ∂E/∂W_Gh = λ₁[−R₁ + W_Gh R₀ + W_Ga W_A E[c^Low hᵀ]]
/// ∂E/∂W_Ga = λ₁[W_Ga W_A R_clow W_Aᵀ − E[h(t) c^Low(t−1)ᵀ] W_Aᵀ + W_Gh E[h c^Lowᵀ] W_Aᵀ]
/// ```
pub fn testbed_closed_form_grads(tb: &LinearTestbed, mo: &TestbedMoments) -> Result<(Matrix, Matrix)> {
    let k = tb.w_ga.matmul(&tb.w_a)?;
    let dgh = tb
        .w_gh
        .matmul(&mo.r0)?
        .sub(&mo.r1)?
        .add(&k.matmul(&mo.h_clow.transpose())?)?
        .scale(tb.lambda1);
    let wat = tb.w_a.transpose();
    let dga = k
        .matmul(&mo.r_clow)?
        .matmul(&wat)?
        .sub(&mo.h_next_clow.matmul(&wat)?)?
        .add(&tb.w_gh.matmul(&mo.h_clow)?.matmul(&wat)?)?
        .scale(tb.lambda1);
    Ok((dgh, dga))
}

/// Explicit representation loss `½λ₁ mean‖h(t) − ĥ(t)‖²` over all pairs.
pub fn testbed_loss(tb: &LinearTestbed, h: &[Vec<Vec<f64>>], c_low: &[Vec<Vec<f64>>]) -> Result<f64> {
    let k = tb.w_ga.matmul(&tb.w_a)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (hs, cs) in h.iter().zip(c_low) {
        for t in 1..hs.len() {
            let pred = tb.w_gh.matvec(&hs[t - 1])?;
            let act = k.matvec(&cs[t - 1])?;
            total += hs[t]
                .iter()
                .zip(pred.iter().zip(&act))
                .map(|(a, (b, c))| (a - b - c).powi(2))
                .sum::<f64>();
            pairs += 1;
        }
    }
    Ok(0.5 * tb.lambda1 * total / pairs.max(1) as f64)
}

/// Stop-gradient derivative of [`testbed_loss`] with respect to the top
/// input map, through the exact two-point sensitivity of the top layer.
pub fn testbed_top_grad(tb: &LinearTestbed, lower: &LowerRollout, h: &[Vec<Vec<f64>>]) -> Result<Matrix> {
    let (p, tau) = tb.top();
    let k = tb.w_ga.matmul(&tb.w_a)?;
    let pairs: usize = h.iter().map(|s| s.len().saturating_sub(1)).sum();
    let scale = tb.lambda1 / pairs.max(1) as f64;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    let tau_diag = vec![tau; p.rows()];
    for ((hs, us), cs) in h.iter().zip(&lower.top_input).zip(&lower.c_low) {
        let mut sens = GenericSensitivity::zeros(p.rows(), p.cols());
        for t in 0..hs.len() {
            let r_hat = Matrix::from_fn(p.rows(), p.cols(), |_, j| us[t][j]);
            generic_two_point_update(&mut sens, &tau_diag, &r_hat)?;
            if t + 1 < hs.len() {
                // h(t) is the context for target h(t+1)
                let pred = tb.w_gh.matvec(&hs[t])?;
                let act = k.matvec(&cs[t])?;
                let err: Vec<f64> = hs[t + 1]
                    .iter()
                    .zip(pred.iter().zip(&act))
                    .map(|(a, (b, c))| a - b - c)
                    .collect();
                let dh = tb.w_gh.matvec_t(&err)?;
                for i in 0..p.rows() {
                    let d = -scale * dh[i];
                    for (g, s) in grad.row_mut(i).iter_mut().zip(sens.gamma.row(i)) {
                        *g += d * s;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Relative balance gap `‖W_GhᵀW_Gh − λ₁HHᵀ‖_F / ‖λ₁HHᵀ‖_F`; zero when both
/// sides are below 1e-12.
pub fn balance_residual(w_gh: &Matrix, hht: &Matrix, lambda1: f64) -> Result<f64> {
    let wtw = w_gh.transpose().matmul(w_gh)?;
    let target = hht.scale(lambda1);
    let (a, b) = (wtw.frobenius(), target.frobenius());
    if a < 1e-12 && b < 1e-12 {
        return Ok(0.0);
    }
    Ok(wtw.sub(&target)?.frobenius() / b.max(1e-30))
}

/// `HHᵀ` from a `d × T` matrix whose columns are already scaled by `1/√T`.
pub fn hht_from_columns(h: &Matrix) -> Result<Matrix> {
    h.matmul(&h.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rel_err;

    fn small_model(rng: &mut Rng, predictor: PredictorKind) -> JepaModel {
        let cfg = JepaConfig {
            patch_dim: 6,
            n: 4,
            d_h: 3,
            predictor,
            ..JepaConfig::default()
        };
        JepaModel::init(&cfg, rng).unwrap()
    }

    #[test]
    fn zero_rgc_has_no_temporal_mixing() {
        let mut rng = Rng::new(1);
        let model = small_model(&mut rng, PredictorKind::Linear);
        let patches: Vec<Vec<f64>> = (0..5).map(|_| rng.normal_vec(6, 1.0)).collect();
        let enc = encode_sequence(&model, &patches).unwrap();
        for (t, p) in patches.iter().enumerate() {
            let want = model.embed.matvec(&model.featurize(p).unwrap()).unwrap();
            assert_eq!(enc.h[t], want);
        }
        let same = vec![patches[0].clone(), patches[0].clone()];
        let enc = encode_sequence(&model, &same).unwrap();
        assert_eq!(enc.h[0], enc.h[1]);
    }

    #[test]
    fn encode_matches_manual_composition() {
        let mut rng = Rng::new(2);
        let mut model = small_model(&mut rng, PredictorKind::Linear);
        for k in 0..4 {
            for i in 0..4 {
                model.rgc.matrices_mut()[k][(i, i)] = rng.normal();
            }
        }
        let patches: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(6, 1.0)).collect();
        let enc = encode_sequence(&model, &patches).unwrap();
        let mut st = RgcState::zeros(4);
        for (t, p) in patches.iter().enumerate() {
            let x = model.featurizer.matvec(p).unwrap();
            st = rgc_step(&st, &x, &model.rgc).unwrap().0;
            assert_eq!(enc.h[t], model.embed.matvec(&st.s).unwrap());
        }
        assert_eq!(enc.states.len(), 7);
    }

    #[test]
    fn predictor_examples() {
        let mut rng = Rng::new(3);
        let h = rng.normal_vec(5, 1.0);
        assert_eq!(Predictor::identity(5).forward(&h).unwrap().0, h);
        let zero = Predictor::Linear {
            g: Matrix::zeros(5, 5),
        };
        assert_eq!(zero.forward(&h).unwrap().0, vec![0.0; 5]);

        let w1 = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let b1 = Matrix::random_normal(7, 1, 1.0, &mut rng);
        let w2 = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let b2 = Matrix::random_normal(5, 1, 1.0, &mut rng);
        let hidden: Vec<f64> = w1
            .matvec(&h)
            .unwrap()
            .iter()
            .zip(b1.data())
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let manual: Vec<f64> = w2
            .matvec(&hidden)
            .unwrap()
            .iter()
            .zip(b2.data())
            .map(|(a, b)| a + b)
            .collect();
        let mlp = Predictor::Mlp { w1, b1, w2, b2 };
        assert_eq!(mlp.forward(&h).unwrap().0, manual);
    }

    #[test]
    fn near_identity_mlp_is_close_to_identity() {
        let mut rng = Rng::new(4);
        let p = Predictor::near_identity_mlp(6, 12, &mut rng).unwrap();
        let h = rng.normal_vec(6, 0.5);
        let out = p.forward(&h).unwrap().0;
        assert!(rel_err(&out, &h) < 0.02);
        assert!(Predictor::near_identity_mlp(6, 10, &mut rng).is_err());
    }

    #[test]
    fn predictor_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let p = Predictor::near_identity_mlp(3, 7, &mut rng).unwrap();
        let h = rng.normal_vec(3, 1.0);
        let w = rng.normal_vec(3, 1.0);
        let f = |p: &Predictor, h: &[f64]| dot(&p.forward(h).unwrap().0, &w);
        let (_, cache) = p.forward(&h).unwrap();
        let mut grads = p.zero_grads();
        let dh = p.backward(&h, &cache, &w, &mut grads).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut hp = h.clone();
            hp[i] += eps;
            let mut hm = h.clone();
            hm[i] -= eps;
            assert!(((f(&p, &hp) - f(&p, &hm)) / (2.0 * eps) - dh[i]).abs() < 1e-7);
        }
        for b in 0..4 {
            let (r, c) = grads[b].shape();
            for idx in 0..r * c {
                let mut pp = p.clone();
                pp.blocks_mut()[b].data_mut()[idx] += eps;
                let mut pm = p.clone();
                pm.blocks_mut()[b].data_mut()[idx] -= eps;
                let fd = (f(&pp, &h) - f(&pm, &h)) / (2.0 * eps);
                assert!((fd - grads[b].data()[idx]).abs() < 1e-6, "block {b} idx {idx}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        let e = jepa_loss(&[1.0, 2.0], &[1.0, 2.0], LossKind::Squared, 1.0).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.d_pred, vec![0.0, 0.0]);
        let e = jepa_loss(&[1.0, 0.0], &[0.0, 0.0], LossKind::Squared, 1.0).unwrap();
        assert_eq!(e.loss, 0.5);
        assert_eq!(e.d_pred, vec![-1.0, 0.0]);
        let h = [0.3, -1.2, 2.0];
        let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let e = jepa_loss(&h, &h2, LossKind::Cosine, 1.0).unwrap();
        assert!(e.loss.abs() < 1e-15);
        assert!(matches!(
            jepa_loss(&[0.0, 0.0], &[1.0, 0.0], LossKind::Cosine, 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(jepa_loss(&[1.0], &[1.0, 2.0], LossKind::Squared, 1.0).is_err());
    }

    #[test]
    fn cosine_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let a = rng.normal_vec(4, 1.0);
        let b = rng.normal_vec(4, 1.0);
        let e = jepa_loss(&a, &b, LossKind::Cosine, 1.0).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            let mut bp = b.clone();
            bp[i] += eps;
            let mut bm = b.clone();
            bm[i] -= eps;
            let fd = (jepa_loss(&a, &bp, LossKind::Cosine, 1.0).unwrap().loss
                - jepa_loss(&a, &bm, LossKind::Cosine, 1.0).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - e.d_pred[i]).abs() < 1e-8);
            let mut ap = a.clone();
            ap[i] += eps;
            let mut am = a.clone();
            am[i] -= eps;
            let fd = (jepa_loss(&ap, &b, LossKind::Cosine, 1.0).unwrap().loss
                - jepa_loss(&am, &b, LossKind::Cosine, 1.0).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - e.d_target[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_predictor_gives_simsiam_start() {
        let mut rng = Rng::new(7);
        let model = small_model(&mut rng, PredictorKind::Linear);
        let patches: Vec<Vec<f64>> = (0..8).map(|_| rng.normal_vec(6, 1.0)).collect();
        let enc = encode_sequence(&model, &patches).unwrap();
        let losses = sequence_losses(&model, &enc).unwrap();
        assert_eq!(losses.len(), 7);
        for t in 1..enc.h.len() {
            let d: f64 = enc.h[t]
                .iter()
                .zip(&enc.h[t - 1])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert_eq!(losses[t - 1], 0.5 * d);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = Rng::new(8);
        for kind in [PredictorKind::Linear, PredictorKind::Mlp] {
            let mut model = small_model(&mut rng, kind);
            model.rgc.matrices_mut()[2][(1, 1)] = 0.25;
            let bytes = encode_checkpoint(&model);
            assert_eq!(&bytes[..5], b"RJPW1");
            assert_eq!(decode_checkpoint(&bytes).unwrap(), model);

            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
            let mut bad = bytes.clone();
            let mid = bad.len() / 2;
            bad[mid] ^= 0xFF;
            assert!(decode_checkpoint(&bad).is_err());
            assert!(matches!(
                decode_checkpoint(&bytes[..bytes.len() - 20]),
                Err(Error::Format { .. })
            ));
        }
    }

    fn testbed_data(rng: &mut Rng, seqs: usize, t: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
        (0..seqs)
            .map(|_| {
                let mut z = rng.normal_vec(d, 1.0);
                (0..t)
                    .map(|_| {
                        z = z.iter().map(|v| 0.8 * v + 0.6 * rng.normal()).collect();
                        z.clone()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn closed_form_examples() {
        let mut rng = Rng::new(9);
        let mut tb = LinearTestbed::init(&TestbedConfig::default(), &mut rng).unwrap();
        let data = testbed_data(&mut rng, 3, 30, 8);
        let low = rollout_lower(&tb, &data).unwrap();
        let h = rollout_top(&tb, &low).unwrap();
        let mo = testbed_moments(&h, &low.c_low).unwrap();

        tb.w_gh = Matrix::zeros(6, 6);
        tb.w_ga = Matrix::zeros(6, 2);
        let (dgh, _) = testbed_closed_form_grads(&tb, &mo).unwrap();
        assert!(rel_err(dgh.data(), mo.r1.scale(-tb.lambda1).data()) < 1e-15);

        // white h: R₁ = 0
        let white = TestbedMoments {
            r1: Matrix::zeros(6, 6),
            ..mo.clone()
        };
        tb.w_gh = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let (dgh, _) = testbed_closed_form_grads(&tb, &white).unwrap();
        let want = tb.w_gh.matmul(&white.r0).unwrap().scale(tb.lambda1);
        assert!(rel_err(dgh.data(), want.data()) < 1e-14);
        tb.w_gh = Matrix::zeros(6, 6);
        let (dgh, _) = testbed_closed_form_grads(&tb, &white).unwrap();
        assert_eq!(dgh.max_abs(), 0.0);
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let cfg = TestbedConfig {
            lambda1: 0.7,
            ..TestbedConfig::default()
        };
        let mut tb = LinearTestbed::init(&cfg, &mut rng).unwrap();
        tb.w_gh = Matrix::random_normal(6, 6, 0.5, &mut rng);
        tb.w_ga = Matrix::random_normal(6, 2, 0.5, &mut rng);
        let data = testbed_data(&mut rng, 4, 25, 8);
        let low = rollout_lower(&tb, &data).unwrap();
        let h = rollout_top(&tb, &low).unwrap();
        let mo = testbed_moments(&h, &low.c_low).unwrap();
        let (dgh, dga) = testbed_closed_form_grads(&tb, &mo).unwrap();

        let eps = 1e-5;
        let fd = |which: usize, idx: usize| -> f64 {
            let mut p = tb.clone();
            let mut m = tb.clone();
            let (bp, bm) = if which == 0 {
                (&mut p.w_gh, &mut m.w_gh)
            } else {
                (&mut p.w_ga, &mut m.w_ga)
            };
            let step = eps * bp.data()[idx].abs().max(1.0);
            bp.data_mut()[idx] += step;
            bm.data_mut()[idx] -= step;
            (testbed_loss(&p, &h, &low.c_low).unwrap() - testbed_loss(&m, &h, &low.c_low).unwrap())
                / (2.0 * step)
        };
        let fd_gh: Vec<f64> = (0..36).map(|i| fd(0, i)).collect();
        let fd_ga: Vec<f64> = (0..12).map(|i| fd(1, i)).collect();
        assert!(rel_err(dgh.data(), &fd_gh) < 1e-7);
        assert!(rel_err(dga.data(), &fd_ga) < 1e-7);
    }

    #[test]
    fn top_grad_matches_stop_gradient_finite_differences() {
        let mut rng = Rng::new(11);
        let cfg = TestbedConfig {
            top_tau: 0.4,
            init_scale: 0.5,
            ..TestbedConfig::default()
        };
        let tb = LinearTestbed::init(&cfg, &mut rng).unwrap();
        let data = testbed_data(&mut rng, 2, 20, 8);
        let low = rollout_lower(&tb, &data).unwrap();
        let h = rollout_top(&tb, &low).unwrap();
        let g = testbed_top_grad(&tb, &low, &h).unwrap();
        // stop-gradient: targets frozen at the unperturbed rollout, contexts move
        let loss_sg = |tb2: &LinearTestbed| -> f64 {
            let h2 = rollout_top(tb2, &low).unwrap();
            let k = tb2.w_ga.matmul(&tb2.w_a).unwrap();
            let mut total = 0.0;
            let mut pairs = 0;
            for s in 0..h.len() {
                for t in 1..h[s].len() {
                    let pred = tb2.w_gh.matvec(&h2[s][t - 1]).unwrap();
                    let act = k.matvec(&low.c_low[s][t - 1]).unwrap();
                    total += h[s][t]
                        .iter()
                        .zip(pred.iter().zip(&act))
                        .map(|(a, (b, c))| (a - b - c).powi(2))
                        .sum::<f64>();
                    pairs += 1;
                }
            }
            0.5 * tb2.lambda1 * total / pairs as f64
        };
        let eps = 1e-5;
        let (r, c) = tb.top().0.shape();
        let fd: Vec<f64> = (0..r * c)
            .map(|idx| {
                let mut p = tb.clone();
                p.top_mut().data_mut()[idx] += eps;
                let mut m = tb.clone();
                m.top_mut().data_mut()[idx] -= eps;
                (loss_sg(&p) - loss_sg(&m)) / (2.0 * eps)
            })
            .collect();
        assert!(rel_err(g.data(), &fd) < 1e-7);
    }

    #[test]
    fn whitening_gives_identity_second_moment() {
        let mut rng = Rng::new(12);
        let tb = LinearTestbed::init(&TestbedConfig::default(), &mut rng).unwrap();
        let data = testbed_data(&mut rng, 3, 40, 8);
        let low = rollout_lower(&tb, &data).unwrap();
        let mut m = Matrix::zeros(8, 8);
        let mut count = 0;
        for v in low.top_input.iter().flatten() {
            m.add_outer(1.0, v, v).unwrap();
            count += 1;
        }
        let m = m.scale(1.0 / count as f64);
        assert!(m.sub(&Matrix::identity(8)).unwrap().max_abs() < 1e-10);

        let tb = LinearTestbed {
            normalization: TopNormalization::UnitNorm,
            ..tb
        };
        let low = rollout_lower(&tb, &data).unwrap();
        for v in low.top_input.iter().flatten() {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_residual_examples() {
        let mut rng = Rng::new(13);
        let h = Matrix::random_normal(4, 10, 1.0 / 10f64.sqrt(), &mut rng);
        let hht = hht_from_columns(&h).unwrap();
        let lambda1: f64 = 1.7;
        let w = hht.cholesky().unwrap().transpose().scale(lambda1.sqrt());
        assert!(balance_residual(&w, &hht, lambda1).unwrap() < 1e-12);
        assert_eq!(balance_residual(&Matrix::zeros(4, 4), &hht, lambda1).unwrap(), 1.0);
        assert_eq!(
            balance_residual(&Matrix::zeros(4, 4), &Matrix::zeros(4, 4), 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn lagged_third_moment_symmetry_and_scale() {
        let mut rng = Rng::new(5);
        let seq: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(3, 1.0)).collect();
        let neg: Vec<Vec<f64>> = seq.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!(lagged_third_moment(&[seq.clone(), neg]) < 1e-12);
        assert!(lagged_third_moment(&[seq]) > 0.0);
        let constant = vec![vec![vec![2.0]; 6]];
        assert!((lagged_third_moment(&constant) - 1.0).abs() < 1e-12);
        assert_eq!(lagged_third_moment(&[]), 0.0);
    }
}
