//! Spatial transformer stacks attending across microphone channels.
//!
//! Every time frame is processed independently: the sequence axis of the
//! attention is the channel index, so a `[M, K, F]` spectrum is treated as a
//! batch of `K` sequences of length `M`.
//!
//! Blocks are post-norm: `z1 = LN(v + MHA(q, k, v))`, `out = LN(z1 + FF(z1))`.
//! The feed-forward network is `Linear -> ReLU -> Linear`.
//!
//! In the two-stack variants, queries and keys come from a complex embedding
//! of the spectra at every block and only the values chain from block to
//! block. The score is `|q k^H| / sqrt(D/H)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Init, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// `(heads, head width)` pairs evaluated in the reference experiments.
pub const HEAD_GRID: [(usize, usize); 3] = [(16, 64), (64, 16), (256, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Cat,
    RealImag,
    MagPhase,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cat, Variant::RealImag, Variant::MagPhase];

    pub fn stacks(self) -> usize {
        match self {
            Variant::Cat => 1,
            Variant::RealImag | Variant::MagPhase => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cat => "cat",
            Variant::RealImag => "realimag",
            Variant::MagPhase => "magphase",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cat" => Ok(Variant::Cat),
            "realimag" | "real_imag" => Ok(Variant::RealImag),
            "magphase" | "mag_phase" => Ok(Variant::MagPhase),
            _ => Err(Error::Config(format!("unknown tnet variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TNetConfig {
    pub variant: Variant,
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub positional_encoding: bool,
    pub ff_dim: usize,
}

impl TNetConfig {
    pub fn new(variant: Variant, blocks: usize, heads: usize, dim: usize) -> Self {
        TNetConfig { variant, blocks, heads, dim, positional_encoding: true, ff_dim: 2 * dim }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("tnet blocks, heads, dim and ff_dim must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("tnet dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Sinusoidal encoding `[m, d]` over the channel index.
pub fn positional_encoding(m: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; m * d];
    for pos in 0..m {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new([m, d], data).expect("shape matches data")
}

/// `[B, M, D]` to `[B*H, M, D/H]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::shape("split_heads", format!("{s:?} into {heads} heads")));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, m, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, m, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] % heads != 0 {
        return Err(Error::shape("merge_heads", format!("{s:?} from {heads} heads")));
    }
    let (b, m, dh) = (s[0] / heads, s[1], s[2]);
    let x = tape.reshape(x, &[b, heads, m, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, m, heads * dh])
}

/// Row-stochastic weights `softmax(q k^T / sqrt(d))` over `[..., M, d]` inputs.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = *tape.shape(q).last().ok_or_else(|| Error::shape("attention", "scalar query"))?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    let axis = tape.shape(s).len() - 1;
    tape.softmax(s, axis)
}

/// Row-stochastic weights `softmax(|q k^H| / sqrt(d))` for complex `q`, `k`.
pub fn complex_attention_weights(tape: &mut Tape, q: (Var, Var), k: (Var, Var)) -> Result<Var> {
    let d = *tape.shape(q.0).last().ok_or_else(|| Error::shape("attention", "scalar query"))?;
    let (krt, kit) = (tape.transpose(k.0)?, tape.transpose(k.1)?);
    let rr = tape.matmul(q.0, krt)?;
    let ii = tape.matmul(q.1, kit)?;
    let ir = tape.matmul(q.1, krt)?;
    let ri = tape.matmul(q.0, kit)?;
    let sre = tape.add(rr, ii)?;
    let sim = tape.sub(ir, ri)?;
    let mag = tape.complex_abs(sre, sim)?;
    let s = tape.scale(mag, 1.0 / (d as f64).sqrt())?;
    let axis = tape.shape(s).len() - 1;
    tape.softmax(s, axis)
}

/// Scaled dot-product attention of real heads.
pub fn attention_head(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let w = attention_weights(tape, q, k)?;
    tape.matmul(w, v)
}

/// Attention with magnitude-of-complex-inner-product scores.
pub fn complex_attention_head(tape: &mut Tape, q: (Var, Var), k: (Var, Var), v: Var) -> Result<Var> {
    let w = complex_attention_weights(tape, q, k)?;
    tape.matmul(w, v)
}

/// Project `[B, M, D]` queries, keys and values with `[D, D]` matrices whose
/// `h`-th column block is the head-`h` projection, and split into heads.
pub fn project_qkv(
    tape: &mut Tape,
    z: (Var, Var, Var),
    w: (Var, Var, Var),
    heads: usize,
) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(z.0, w.0)?;
    let k = tape.matmul(z.1, w.1)?;
    let v = tape.matmul(z.2, w.2)?;
    Ok((split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?))
}

/// Parameters of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wmh: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

impl BlockParams {
    pub fn register(store: &mut ParamStore, init: &mut Init, prefix: &str, dim: usize, ff_dim: usize) -> Self {
        let mut lin = |name: &str, i: usize, o: usize| store.add(format!("{prefix}.{name}"), init.uniform(&[i, o], i));
        let wq = lin("wq", dim, dim);
        let wk = lin("wk", dim, dim);
        let wv = lin("wv", dim, dim);
        let wmh = lin("wmh", dim, dim);
        let ff1w = lin("ff1.w", dim, ff_dim);
        let ff2w = lin("ff2.w", ff_dim, dim);
        let ff1b = store.add(format!("{prefix}.ff1.b"), Tensor::zeros([ff_dim]));
        let ff2b = store.add(format!("{prefix}.ff2.b"), Tensor::zeros([dim]));
        let mut norm = |name: &str| {
            (
                store.add(format!("{prefix}.{name}.gain"), Tensor::ones([dim])),
                store.add(format!("{prefix}.{name}.bias"), Tensor::zeros([dim])),
            )
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        BlockParams { wq, wk, wv, wmh, ln1, ff1: (ff1w, ff1b), ff2: (ff2w, ff2b), ln2 }
    }
}

/// Queries and keys feeding a block: real (shared with the values) or complex.
#[derive(Clone, Copy, Debug)]
pub enum QueryKey {
    Real(Var),
    Complex(Var, Var),
}

/// One post-norm transformer block over `[B, M, D]` values.
/// Returns the output and the `[B*H, M, M]` attention weights.
pub fn transformer_block(
    tape: &mut Tape,
    p: &BlockParams,
    b: &Bound,
    qk: QueryKey,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let vh = tape.matmul(v, b[p.wv])?;
    let vh = split_heads(tape, vh, heads)?;
    let weights = match qk {
        QueryKey::Real(z) => {
            let q = tape.matmul(z, b[p.wq])?;
            let k = tape.matmul(z, b[p.wk])?;
            let (q, k) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?);
            attention_weights(tape, q, k)?
        }
        QueryKey::Complex(zr, zi) => {
            let mut proj = |w: Var| -> Result<(Var, Var)> {
                let r = tape.matmul(zr, w)?;
                let i = tape.matmul(zi, w)?;
                Ok((split_heads(tape, r, heads)?, split_heads(tape, i, heads)?))
            };
            let q = proj(b[p.wq])?;
            let k = proj(b[p.wk])?;
            complex_attention_weights(tape, q, k)?
        }
    };
    let a = tape.matmul(weights, vh)?;
    let a = merge_heads(tape, a, heads)?;
    let mh = tape.matmul(a, b[p.wmh])?;
    let r1 = tape.add(v, mh)?;
    let z1 = tape.layer_norm(r1, b[p.ln1.0], b[p.ln1.1], LAYER_NORM_EPS)?;
    let h = tape.matmul(z1, b[p.ff1.0])?;
    let h = tape.add_bias(h, b[p.ff1.1])?;
    let h = tape.leaky_relu(h, 0.0)?;
    let f = tape.matmul(h, b[p.ff2.0])?;
    let f = tape.add_bias(f, b[p.ff2.1])?;
    let r2 = tape.add(z1, f)?;
    let out = tape.layer_norm(r2, b[p.ln2.0], b[p.ln2.1], LAYER_NORM_EPS)?;
    Ok((out, weights))
}

/// One stack: value embedding, optional complex query/key embedding, blocks and
/// an output projection to `out_bins`.
#[derive(Clone, Debug)]
pub struct StackParams {
    pub embed_v: ParamId,
    pub embed_qk: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub proj: (ParamId, ParamId),
}

/// A registered TNet.
#[derive(Clone, Debug)]
pub struct TNet {
    pub config: TNetConfig,
    pub in_bins: usize,
    pub out_bins: usize,
    pub stacks: Vec<StackParams>,
}

/// Result of [`TNet::forward`].
#[derive(Clone, Debug)]
pub struct TNetOutput {
    /// `[P, K, out_bins]` feature planes: `M` for Cat, `2M` otherwise.
    pub planes: Var,
    /// Attention weights of every block, `[K*H, M, M]`.
    pub weights: Vec<Var>,
}

impl TNet {
    /// Register parameters for spectra with `in_bins` frequency bins, projecting
    /// each stack's output back to `out_bins`.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        config: TNetConfig,
        in_bins: usize,
        out_bins: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (d, v_in) = match config.variant {
            Variant::Cat => (config.dim, 2 * in_bins),
            _ => (config.dim, in_bins),
        };
        let stacks = (0..config.variant.stacks())
            .map(|s| {
                let sp = format!("{prefix}.stack{s}");
                let embed_v = store.add(format!("{sp}.embed_v"), init.uniform(&[v_in, d], v_in));
                let embed_qk = (config.variant != Variant::Cat)
                    .then(|| store.add(format!("{sp}.embed_qk"), init.uniform(&[in_bins, d], in_bins)));
                let blocks = (0..config.blocks)
                    .map(|i| BlockParams::register(store, init, &format!("{sp}.block{i}"), d, config.ff_dim))
                    .collect();
                let proj = (
                    store.add(format!("{sp}.proj.w"), init.uniform(&[d, out_bins], d)),
                    store.add(format!("{sp}.proj.b"), Tensor::zeros([out_bins])),
                );
                StackParams { embed_v, embed_qk, blocks, proj }
            })
            .collect();
        Ok(TNet { config, in_bins, out_bins, stacks })
    }

    /// Feature planes produced for an `m`-channel input.
    pub fn out_planes(&self, m: usize) -> usize {
        m * self.config.variant.stacks()
    }

    /// Run on `[M, K, F]` spectra planes.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, re: Var, im: Var) -> Result<TNetOutput> {
        let s = tape.shape(re).to_vec();
        if s.len() != 3 || s[2] != self.in_bins || tape.shape(im) != s.as_slice() {
            return Err(Error::shape(
                "tnet",
                format!("spectra {:?}/{:?} with {} input bins", s, tape.shape(im), self.in_bins),
            ));
        }
        let (m, k) = (s[0], s[1]);
        let d = self.config.dim;
        let re = tape.permute(re, &[1, 0, 2])?;
        let im = tape.permute(im, &[1, 0, 2])?;
        let pe = self.config.positional_encoding.then(|| tape.constant(positional_encoding(m, d)));
        let with_pe = |tape: &mut Tape, x: Var| match pe {
            Some(pe) => tape.add_bias(x, pe),
            None => Ok(x),
        };
        let value_planes: Vec<Var> = match self.config.variant {
            Variant::Cat => vec![tape.concat(&[re, im], 2)?],
            Variant::RealImag => vec![re, im],
            Variant::MagPhase => vec![tape.complex_abs(re, im)?, tape.atan2(im, re)?],
        };
        let mut weights = Vec::new();
        let mut outs = Vec::new();
        for (stack, plane) in self.stacks.iter().zip(value_planes) {
            let v0 = tape.matmul(plane, b[stack.embed_v])?;
            let mut v = with_pe(tape, v0)?;
            let qk = match stack.embed_qk {
                Some(e) => {
                    let zr = tape.matmul(re, b[e])?;
                    let zr = with_pe(tape, zr)?;
                    let zi = tape.matmul(im, b[e])?;
                    Some((zr, zi))
                }
                None => None,
            };
            for block in &stack.blocks {
                let q = match qk {
                    Some((zr, zi)) => QueryKey::Complex(zr, zi),
                    None => QueryKey::Real(v),
                };
                let (out, w) = transformer_block(tape, block, b, q, v, self.config.heads)?;
                weights.push(w);
                v = out;
            }
            let y = tape.matmul(v, b[stack.proj.0])?;
            let y = tape.add_bias(y, b[stack.proj.1])?;
            outs.push(tape.permute(y, &[1, 0, 2])?);
        }
        let planes = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
        debug_assert_eq!(tape.shape(planes), [self.out_planes(m), k, self.out_bins]);
        Ok(TNetOutput { planes, weights })
    }
}
