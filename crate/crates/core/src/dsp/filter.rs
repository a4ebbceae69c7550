//! Per-bin complex filtering of multi-channel spectra.
//!
//! Multi-channel mode computes `X = sum_m conj(B_m) * Y_m` in every bin.
//! Single-channel mode computes `X = B * Y_ref` on one reference channel.

use super::Spectra;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    Multi,
    Single { reference: usize },
}

impl FilterMode {
    /// Filter taps per bin for an `m`-channel input.
    pub fn taps(&self, m: usize) -> usize {
        match self {
            FilterMode::Multi => m,
            FilterMode::Single { .. } => 1,
        }
    }
}

/// Complex filters for every source, each as `[taps, K, F]` real/imag planes.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSet {
    pub mode: FilterMode,
    pub sources: Vec<(Tensor, Tensor)>,
}

impl FilterSet {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

fn check_dims(spec: &Spectra, filters: &FilterSet) -> Result<()> {
    let (m, k, f) = (spec.num_channels(), spec.num_frames(), spec.num_bins());
    if let FilterMode::Single { reference } = filters.mode {
        if reference >= m {
            return Err(Error::Input(format!("reference channel {reference} out of range for {m} channels")));
        }
    }
    let want = [filters.mode.taps(m), k, f];
    for (i, (re, im)) in filters.sources.iter().enumerate() {
        if re.shape() != want || im.shape() != want {
            return Err(Error::shape(
                "apply_filter",
                format!("source {i} filter {:?}/{:?} vs expected {want:?}", re.shape(), im.shape()),
            ));
        }
    }
    Ok(())
}

/// Filter `spec` with every source's filter, returning one single-channel
/// [`Spectra`] per source.
pub fn apply_filter(spec: &Spectra, filters: &FilterSet) -> Result<Vec<Spectra>> {
    spec.validate()?;
    check_dims(spec, filters)?;
    let (k, f) = (spec.num_frames(), spec.num_bins());
    let n = k * f;
    let shape = vec![1, k, f];
    filters
        .sources
        .iter()
        .map(|(br, bi)| {
            let mut xr = vec![0.0; n];
            let mut xi = vec![0.0; n];
            let (br, bi) = (br.data(), bi.data());
            match filters.mode {
                FilterMode::Multi => {
                    for m in 0..spec.num_channels() {
                        let (yr, yi) = spec.channel(m);
                        let (br, bi) = (&br[m * n..(m + 1) * n], &bi[m * n..(m + 1) * n]);
                        for j in 0..n {
                            xr[j] += br[j] * yr[j] + bi[j] * yi[j];
                            xi[j] += br[j] * yi[j] - bi[j] * yr[j];
                        }
                    }
                }
                FilterMode::Single { reference } => {
                    let (yr, yi) = spec.channel(reference);
                    for j in 0..n {
                        xr[j] = br[j] * yr[j] - bi[j] * yi[j];
                        xi[j] = br[j] * yi[j] + bi[j] * yr[j];
                    }
                }
            }
            Ok(Spectra {
                re: Tensor::new(shape.clone(), xr)?,
                im: Tensor::new(shape.clone(), xi)?,
                ..spec.clone()
            })
        })
        .collect()
}

/// Differentiable filtering of `[M, K, F]` planes by `[taps, K, F]` filter
/// planes, returning `[K, F]` output planes.
pub fn apply_filter_graph(tape: &mut Tape, y: (Var, Var), b: (Var, Var), mode: FilterMode) -> Result<(Var, Var)> {
    let (yr, yi) = y;
    let (br, bi) = b;
    let ys = tape.shape(yr).to_vec();
    if ys.len() != 3 || tape.shape(yi) != ys.as_slice() {
        return Err(Error::shape("apply_filter", format!("spectra {:?}/{:?}", ys, tape.shape(yi))));
    }
    let want = [mode.taps(ys[0]), ys[1], ys[2]];
    if tape.shape(br) != want || tape.shape(bi) != want {
        return Err(Error::shape(
            "apply_filter",
            format!("filter {:?}/{:?} vs expected {want:?}", tape.shape(br), tape.shape(bi)),
        ));
    }
    let (k, f) = (ys[1], ys[2]);
    match mode {
        FilterMode::Multi => {
            let rr = tape.mul(br, yr)?;
            let ii = tape.mul(bi, yi)?;
            let ri = tape.mul(br, yi)?;
            let ir = tape.mul(bi, yr)?;
            let xr = tape.add(rr, ii)?;
            let xi = tape.sub(ri, ir)?;
            Ok((tape.sum_axis(xr, 0)?, tape.sum_axis(xi, 0)?))
        }
        FilterMode::Single { reference } => {
            if reference >= ys[0] {
                return Err(Error::Input(format!("reference channel {reference} out of range for {} channels", ys[0])));
            }
            let yr = tape.slice(yr, 0, reference, reference + 1)?;
            let yi = tape.slice(yi, 0, reference, reference + 1)?;
            let rr = tape.mul(br, yr)?;
            let ii = tape.mul(bi, yi)?;
            let ri = tape.mul(br, yi)?;
            let ir = tape.mul(bi, yr)?;
            let xr = tape.sub(rr, ii)?;
            let xi = tape.add(ri, ir)?;
            Ok((tape.reshape(xr, &[k, f])?, tape.reshape(xi, &[k, f])?))
        }
    }
}
