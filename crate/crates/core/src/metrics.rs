//! Projection-based separation metrics.
//!
//! SI-SDR projects the estimate onto the target. SIR splits the estimate's
//! projection onto `span{target, interferer}` into the part along the target
//! and the remainder. Both are clamped to `[-60, 60]` dB.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::permutations;

pub const CAP_DB: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -CAP_DB;
    }
    if den <= 0.0 {
        return CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

fn check_len(op: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!("{op}: lengths {} and {} must match and be non-zero", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    check_len("si_sdr", estimate, target)?;
    let tt = dot(target, target);
    if tt == 0.0 {
        return Err(Error::Input("si_sdr: target is silent".into()));
    }
    let alpha = dot(estimate, target) / tt;
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (e, t) in estimate.iter().zip(target) {
        let s = alpha * t;
        signal += s * s;
        noise += (e - s) * (e - s);
    }
    Ok(ratio_db(signal, noise))
}

/// Signal-to-interference ratio in dB with least-squares projections.
pub fn sir(estimate: &[f64], target: &[f64], interferer: &[f64]) -> Result<f64> {
    check_len("sir", estimate, target)?;
    check_len("sir", estimate, interferer)?;
    let (tt, ii, ti) = (dot(target, target), dot(interferer, interferer), dot(target, interferer));
    let det = tt * ii - ti * ti;
    if tt == 0.0 || ii == 0.0 || det <= 1e-10 * tt * ii {
        return Err(Error::Input("sir: target and interferer are linearly dependent".into()));
    }
    let (et, ei) = (dot(estimate, target), dot(estimate, interferer));
    // coefficients of the projection onto span{t, i}
    let a = (ii * et - ti * ei) / det;
    let b = (tt * ei - ti * et) / det;
    let c = et / tt;
    let mut target_energy = 0.0;
    let mut interf_energy = 0.0;
    for (t, i) in target.iter().zip(interferer) {
        let e_target = c * t;
        let e_interf = a * t + b * i - e_target;
        target_energy += e_target * e_target;
        interf_energy += e_interf * e_interf;
    }
    Ok(ratio_db(target_energy, interf_energy))
}

/// Metrics of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    /// `permutation[i]` is the separated output matched to target `i`.
    pub permutation: Vec<usize>,
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    pub delta_sdr: Vec<f64>,
    pub delta_sir: Vec<f64>,
}

impl UtteranceReport {
    pub fn mean_delta_sdr(&self) -> f64 {
        mean(&self.delta_sdr)
    }

    pub fn mean_delta_sir(&self) -> f64 {
        mean(&self.delta_sir)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Evaluate separated outputs against targets, relative to the unprocessed
/// reference-channel mixture. All signals are mono and of equal length.
pub fn evaluate(id: &str, separated: &[Vec<f64>], targets: &[Vec<f64>], mixture: &[f64]) -> Result<UtteranceReport> {
    let n = targets.len();
    if separated.len() != n || n < 2 {
        return Err(Error::Input(format!("{} separated outputs for {} targets", separated.len(), n)));
    }
    let mut sdr_table = vec![vec![0.0; n]; n];
    for (i, t) in targets.iter().enumerate() {
        for (j, s) in separated.iter().enumerate() {
            sdr_table[i][j] = si_sdr(s, t)?;
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in permutations(n) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| sdr_table[i][j]).sum();
        if best.as_ref().is_none_or(|b| total > b.1) {
            best = Some((p, total));
        }
    }
    let (perm, _) = best.expect("at least one permutation");
    let mut r = UtteranceReport {
        id: id.to_string(),
        permutation: perm.clone(),
        sdr: Vec::new(),
        sir: Vec::new(),
        delta_sdr: Vec::new(),
        delta_sir: Vec::new(),
    };
    for (i, t) in targets.iter().enumerate() {
        let s = &separated[perm[i]];
        let other = &targets[(i + 1) % n];
        let (sdr, sdr_mix) = (sdr_table[i][perm[i]], si_sdr(mixture, t)?);
        let (sir_v, sir_mix) = (sir(s, t, other)?, sir(mixture, t, other)?);
        r.sdr.push(sdr);
        r.sir.push(sir_v);
        r.delta_sdr.push(sdr - sdr_mix);
        r.delta_sir.push(sir_v - sir_mix);
    }
    Ok(r)
}

/// Per-utterance results and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceReport>,
}

impl EvalReport {
    pub fn mean_delta_sdr(&self) -> f64 {
        mean(&self.utterances.iter().map(|u| u.mean_delta_sdr()).collect::<Vec<_>>())
    }

    pub fn mean_delta_sir(&self) -> f64 {
        mean(&self.utterances.iter().map(|u| u.mean_delta_sir()).collect::<Vec<_>>())
    }

    /// One JSON object per utterance, then one aggregate line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u)?);
            out.push('\n');
        }
        let agg = serde_json::json!({
            "id": "mean",
            "utterances": self.utterances.len(),
            "delta_sdr": self.mean_delta_sdr(),
            "delta_sir": self.mean_delta_sir(),
        });
        out.push_str(&agg.to_string());
        out.push('\n');
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>10} {:>10}\n", "utterance", "perm", "dSI-SDR", "dSIR");
        for u in &self.utterances {
            let perm: Vec<String> = u.permutation.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>10.2} {:>10.2}",
                u.id,
                perm.join(","),
                u.mean_delta_sdr(),
                u.mean_delta_sir()
            );
        }
        let _ = writeln!(out, "{:<16} {:>6} {:>10.2} {:>10.2}", "mean", "", self.mean_delta_sdr(), self.mean_delta_sir());
        out
    }
}
