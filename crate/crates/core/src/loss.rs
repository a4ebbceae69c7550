//! Compressed complex MSE, its two-exponent combination and utterance-level
//! permutation-invariant training.
//!
//! `cmse(X, Y, c) = log10(max(sum |X|^c e^{j phase(X)} - |Y|^c e^{j phase(Y)}|^2, 1e-10))`
//! with magnitudes `sqrt(re^2 + im^2 + 1e-12)` floored at `1e-8` before the power.
//! The compressed value is computed as `z |z|^(c - 1)`, so `c = 1` returns `z` exactly.
//! Both arguments go through the same graph, so the loss is symmetric.

use std::fmt;
use std::str::FromStr;

use crate::dsp::Spectra;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Floor on the summed squared error before `log10`.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Cmse,
    Combined,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Cmse => "cmse",
            LossMode::Combined => "combined",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmse" => Ok(LossMode::Cmse),
            "combined" => Ok(LossMode::Combined),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub c: f64,
    pub alpha: f64,
    /// Compute the loss on `stft(istft(estimate))` instead of the raw estimate.
    pub consistent: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::Combined, c: 0.3, alpha: 0.7, consistent: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::Config(format!("loss.c = {} must lie in (0, 1]", self.c)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if self.mode == LossMode::Combined && self.c >= 1.0 {
            return Err(Error::Config("combined loss needs c < 1".into()));
        }
        if self.c < 0.2 || (self.mode == LossMode::Combined && 1.0 - self.c < 0.2) {
            log::warn!("compression exponent below 0.2 tends to make training unstable");
        }
        Ok(())
    }

    /// Loss on the tape for one target/estimate pair.
    pub fn graph(&self, tape: &mut Tape, target: (Var, Var), estimate: (Var, Var)) -> Result<Var> {
        match self.mode {
            LossMode::Cmse => cmse_graph(tape, target, estimate, self.c),
            LossMode::Combined => combined_graph(tape, target, estimate, self.c, self.alpha),
        }
    }
}

/// `|z|^c e^{j phase(z)}`, written as `z * |z|^(c - 1)`.
fn compress(tape: &mut Tape, z: (Var, Var), c: f64) -> Result<(Var, Var)> {
    let mag = tape.complex_abs(z.0, z.1)?;
    let gain = tape.pow(mag, c - 1.0)?;
    Ok((tape.mul(z.0, gain)?, tape.mul(z.1, gain)?))
}

/// Differentiable cMSE between complex planes of equal shape.
pub fn cmse_graph(tape: &mut Tape, target: (Var, Var), estimate: (Var, Var), c: f64) -> Result<Var> {
    let s = tape.shape(target.0).to_vec();
    for v in [target.1, estimate.0, estimate.1] {
        if tape.shape(v) != s.as_slice() {
            return Err(Error::shape("cmse", format!("{:?} vs {:?}", s, tape.shape(v))));
        }
    }
    let (tr, ti) = compress(tape, target, c)?;
    let (er, ei) = compress(tape, estimate, c)?;
    let dr = tape.sub(tr, er)?;
    let di = tape.sub(ti, ei)?;
    let dr2 = tape.mul(dr, dr)?;
    let di2 = tape.mul(di, di)?;
    let e = tape.add(dr2, di2)?;
    let total = tape.sum(e)?;
    let ln = tape.log_floor(total, LOG_FLOOR)?;
    tape.scale(ln, std::f64::consts::LOG10_E)
}

/// `alpha * cmse(c) + (1 - alpha) * cmse(1 - c)`.
pub fn combined_graph(tape: &mut Tape, target: (Var, Var), estimate: (Var, Var), c: f64, alpha: f64) -> Result<Var> {
    let a = cmse_graph(tape, target, estimate, c)?;
    let b = cmse_graph(tape, target, estimate, 1.0 - c)?;
    let a = tape.scale(a, alpha)?;
    let b = tape.scale(b, 1.0 - alpha)?;
    tape.add(a, b)
}

fn planes(tape: &mut Tape, s: &Spectra) -> (Var, Var) {
    (tape.constant(s.re.clone()), tape.constant(s.im.clone()))
}

fn check_same(a: &Spectra, b: &Spectra) -> Result<()> {
    if a.re.shape() != b.re.shape() {
        return Err(Error::shape("cmse", format!("{:?} vs {:?}", a.re.shape(), b.re.shape())));
    }
    Ok(())
}

/// cMSE on plain spectra.
pub fn cmse(target: &Spectra, estimate: &Spectra, c: f64) -> Result<f64> {
    check_same(target, estimate)?;
    let mut t = Tape::new();
    let (x, y) = (planes(&mut t, target), planes(&mut t, estimate));
    let l = cmse_graph(&mut t, x, y, c)?;
    Ok(t.value(l).item())
}

/// Combined loss on plain spectra.
pub fn combined_loss(target: &Spectra, estimate: &Spectra, c: f64, alpha: f64) -> Result<f64> {
    check_same(target, estimate)?;
    let mut t = Tape::new();
    let (x, y) = (planes(&mut t, target), planes(&mut t, estimate));
    let l = combined_graph(&mut t, x, y, c, alpha)?;
    Ok(t.value(l).item())
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Pick the assignment minimising the summed pairwise loss over the whole
/// utterance. `perm[i]` is the estimate assigned to target `i`. The first
/// permutation in lexicographic order wins ties.
pub fn best_permutation(pair_loss: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = pair_loss.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for p in permutations(n) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| pair_loss[i][j]).sum();
        if total < best.1 {
            best = (p, total);
        }
    }
    best
}

/// Utterance-level PIT on the tape. Returns the mean over sources of the
/// per-source loss under the best assignment, and that assignment.
pub fn upit_graph(
    tape: &mut Tape,
    targets: &[(Var, Var)],
    estimates: &[(Var, Var)],
    loss: impl Fn(&mut Tape, (Var, Var), (Var, Var)) -> Result<Var>,
) -> Result<(Var, Vec<usize>)> {
    if targets.len() != estimates.len() || targets.is_empty() {
        return Err(Error::Input(format!("{} targets vs {} estimates", targets.len(), estimates.len())));
    }
    let mut vars = Vec::with_capacity(targets.len());
    for &t in targets {
        let row = estimates.iter().map(|&e| loss(tape, t, e)).collect::<Result<Vec<_>>>()?;
        vars.push(row);
    }
    let values: Vec<Vec<f64>> = vars.iter().map(|r| r.iter().map(|v| tape.value(*v).item()).collect()).collect();
    let (perm, _) = best_permutation(&values);
    let chosen: Vec<Var> = perm.iter().enumerate().map(|(i, &j)| vars[i][j]).collect();
    let stacked = chosen
        .iter()
        .map(|&v| tape.reshape(v, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat(&stacked, 0)?;
    Ok((tape.mean(all)?, perm))
}

/// Utterance-level PIT on plain spectra with the given loss configuration.
pub fn upit(targets: &[Spectra], estimates: &[Spectra], config: &LossConfig) -> Result<(f64, Vec<usize>)> {
    let mut t = Tape::new();
    let tv: Vec<_> = targets.iter().map(|s| planes(&mut t, s)).collect();
    let ev: Vec<_> = estimates.iter().map(|s| planes(&mut t, s)).collect();
    let (l, p) = upit_graph(&mut t, &tv, &ev, |t, a, b| config.graph(t, a, b))?;
    Ok((t.value(l).item(), p))
}

/// Helper for tests and tools: a `[1, K, F]` plane pair from raw data.
pub fn spectra_like(reference: &Spectra, re: Vec<f64>, im: Vec<f64>) -> Result<Spectra> {
    let shape = reference.re.shape().to_vec();
    Spectra::new(Tensor::new(shape.clone(), re)?, Tensor::new(shape, im)?, reference.config, reference.signal_len, reference.sample_rate)
}
