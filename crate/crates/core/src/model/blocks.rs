//! Transformer blocks of the two towers and the cross-modal mixer between them.

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, LinearInit, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

use super::config::MLP_RATIO;

pub const LN_EPS: f64 = 1e-5;

/// Per-forward constants shared by every block.
pub struct BlockCtx {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub n_heads: usize,
}

impl BlockCtx {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            ln_gain: tape.constant(&[d_model], vec![T::one(); d_model])?,
            ln_bias: tape.constant(&[d_model], vec![T::zero(); d_model])?,
            n_heads,
        })
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.ln_gain, self.ln_bias, T::of(LN_EPS))
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), d, d, LinearInit::Scaled, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    /// Queries from `x: [T, D]`, keys/values from `ctx: [S, D]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: Var, n_heads: usize) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / n_heads;
        let q = self.q.apply(tape, p, x)?;
        let k = self.k.apply(tape, p, ctx)?;
        let v = self.v.apply(tape, p, ctx)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_last(q, h * dh, dh)?;
            let kh = tape.slice_last(k, h * dh, dh)?;
            let vh = tape.slice_last(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let merged = tape.concat(&heads)?;
        self.o.apply(tape, p, merged)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        let h = MLP_RATIO * d;
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, h, LinearInit::Scaled, rng),
            down: Linear::new(store, &format!("{name}.down"), h, d, LinearInit::Scaled, rng),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.apply(tape, p, h)
    }
}

/// Splits an adaLN modulation vector into `(shift, scale, gate)` triples.
fn modulation_chunk<T: Scalar>(tape: &mut Tape<T>, m: Var, idx: usize, d: usize) -> Result<(Var, Var, Var)> {
    let base = 3 * idx * d;
    Ok((
        tape.slice_last(m, base, d)?,
        tape.slice_last(m, base + d, d)?,
        tape.slice_last(m, base + 2 * d, d)?,
    ))
}

/// `norm(x) * (1 + scale) + shift`
fn modulate<T: Scalar>(tape: &mut Tape<T>, ctx: &BlockCtx, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = ctx.norm(tape, x)?;
    let s = tape.add_scalar(scale, T::one())?;
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}

/// `x + gate * y`
fn gated_residual<T: Scalar>(tape: &mut Tape<T>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let gy = tape.mul(y, gate)?;
    tape.add(x, gy)
}

/// Computes the modulation vector `[k * D]` from the activated timestep
/// embedding `c: [1, D]`.
fn modulation<T: Scalar>(tape: &mut Tape<T>, p: &Bound, lin: &Linear, c: Var) -> Result<Var> {
    let m = lin.apply(tape, p, c)?;
    let n = tape.shape(m)[1];
    tape.reshape(m, &[n])
}

/// Audio-tower block: self-attention, cross-attention over the conditioning
/// tokens, and an MLP, each pre-normed, adaLN-modulated and gated.
#[derive(Debug, Clone, Copy)]
pub struct AudioBlock {
    ada: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    mlp: Mlp,
}

impl AudioBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            ada: Linear::new(store, &format!("{name}.ada"), d, 9 * d, LinearInit::Zero, rng),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, rng),
        }
    }

    pub(crate) fn ada_ids(&self) -> (crate::params::ParamId, crate::params::ParamId) {
        (self.ada.w, self.ada.b)
    }

    /// `x: [T, D]`, `text: [S, D]`, `c: [1, D]` (activated timestep embedding).
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ctx: &BlockCtx,
        x: Var,
        text: Var,
        c: Var,
    ) -> Result<Var> {
        check_seq(tape, x, "audio_block")?;
        let d = tape.shape(x)[1];
        let m = modulation(tape, p, &self.ada, c)?;

        let (shift, scale, gate) = modulation_chunk(tape, m, 0, d)?;
        let h = modulate(tape, ctx, x, shift, scale)?;
        let y = self.self_attn.apply(tape, p, h, h, ctx.n_heads)?;
        let x = gated_residual(tape, x, gate, y)?;

        let (shift, scale, gate) = modulation_chunk(tape, m, 1, d)?;
        let h = modulate(tape, ctx, x, shift, scale)?;
        let y = self.cross_attn.apply(tape, p, h, text, ctx.n_heads)?;
        let x = gated_residual(tape, x, gate, y)?;

        let (shift, scale, gate) = modulation_chunk(tape, m, 2, d)?;
        let h = modulate(tape, ctx, x, shift, scale)?;
        let y = self.mlp.apply(tape, p, h)?;
        gated_residual(tape, x, gate, y)
    }
}

/// Video-tower block: the audio block without cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct VideoBlock {
    ada: Linear,
    self_attn: Attention,
    mlp: Mlp,
}

impl VideoBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            ada: Linear::new(store, &format!("{name}.ada"), d, 6 * d, LinearInit::Zero, rng),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, rng),
        }
    }

    pub(crate) fn ada_ids(&self) -> (crate::params::ParamId, crate::params::ParamId) {
        (self.ada.w, self.ada.b)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, ctx: &BlockCtx, x: Var, c: Var) -> Result<Var> {
        check_seq(tape, x, "video_block")?;
        let d = tape.shape(x)[1];
        let m = modulation(tape, p, &self.ada, c)?;

        let (shift, scale, gate) = modulation_chunk(tape, m, 0, d)?;
        let h = modulate(tape, ctx, x, shift, scale)?;
        let y = self.self_attn.apply(tape, p, h, h, ctx.n_heads)?;
        let x = gated_residual(tape, x, gate, y)?;

        let (shift, scale, gate) = modulation_chunk(tape, m, 1, d)?;
        let h = modulate(tape, ctx, x, shift, scale)?;
        let y = self.mlp.apply(tape, p, h)?;
        gated_residual(tape, x, gate, y)
    }
}

fn check_seq<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<()> {
    if tape.shape(x).len() != 2 {
        return Err(Error::shape(op, tape.shape(x), &[]));
    }
    Ok(())
}

/// Audio-visual mixer placed after each pair of tower layers:
///
/// ```text
/// x_a' = y_a + Linear_a([y_a | y_v])
/// x_v' = y_v + Linear_v([y_a | y_v])
/// ```
/// applied independently at every time position.
#[derive(Debug, Clone, Copy)]
pub struct Avmm {
    pub audio: Linear,
    pub video: Linear,
}

impl Avmm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            audio: Linear::new(store, &format!("{name}.audio"), 2 * d, d, LinearInit::Zero, rng),
            video: Linear::new(store, &format!("{name}.video"), 2 * d, d, LinearInit::Zero, rng),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, y_a: Var, y_v: Var) -> Result<(Var, Var)> {
        avmm_mix(tape, y_a, y_v, (p[self.audio.w], p[self.audio.b]), (p[self.video.w], p[self.video.b]))
    }
}

/// The mixing equations on explicit `(weight, bias)` pairs.
pub fn avmm_mix<T: Scalar>(
    tape: &mut Tape<T>,
    y_a: Var,
    y_v: Var,
    audio: (Var, Var),
    video: (Var, Var),
) -> Result<(Var, Var)> {
    if tape.shape(y_a) != tape.shape(y_v) || tape.shape(y_a).len() != 2 {
        return Err(Error::shape("avmm_mix", tape.shape(y_a), tape.shape(y_v)));
    }
    let joint = tape.concat(&[y_a, y_v])?;
    let da = tape.linear(joint, audio.0, audio.1)?;
    let dv = tape.linear(joint, video.0, video.1)?;
    Ok((tape.add(y_a, da)?, tape.add(y_v, dv)?))
}
