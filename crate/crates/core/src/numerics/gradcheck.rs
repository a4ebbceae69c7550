//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input, coordinate, tape gradient, finite difference) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare the tape gradient of scalar `f` at `point` with central differences.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions { step: h, tol, ..Default::default() };
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), &opts)
}

fn eval<F>(f: &F, points: &[Tensor], input: usize, coord: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = match f(&mut tape, &vars) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => return Err(Error::GradCheckNonFinite { input, coord }),
        Err(e) => return Err(e),
    };
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::GradCheckNonFinite { input, coord });
    }
    Ok(v)
}

/// Gradient check of `f` with respect to every tensor in `points`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", format!("objective must be scalar, got {:?}", tape.shape(out))));
    }
    if !tape.value(out).item().is_finite() {
        return Err(Error::GradCheckNonFinite { input: 0, coord: usize::MAX });
    }
    let grads = tape.backward(out)?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol: opts.tol };
    let mut work: Vec<Tensor> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let n = point.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(vars[input]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for coord in coords {
            let orig = point.data()[coord];
            work[input] = with_coord(point, coord, orig + opts.step);
            let plus = eval(&f, &work, input, coord)?;
            work[input] = with_coord(point, coord, orig - opts.step);
            let minus = eval(&f, &work, input, coord)?;
            work[input] = point.clone();
            let fd = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[coord], fd, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((input, coord, analytic[coord], fd));
                }
            }
        }
    }
    Ok(report)
}

fn with_coord(t: &Tensor, coord: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[coord] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
