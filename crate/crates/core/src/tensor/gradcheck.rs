//! Central finite-difference checks for anything built on a [`Tape`].
//!
//! The error for one coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
//! with `floor = 1e-6 * max(1, |f(x)|)`, so coordinates whose true gradient is
//! zero (e.g. a conv bias feeding batch norm) are compared against roundoff of
//! the function value instead of against zero.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "{:<40} checked {:>5}  max rel err {:.3e}  {}",
                r.label,
                r.checked,
                r.max_rel_error,
                if r.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Options for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, max_coords: None, seed: 0 }
    }
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let labels: Vec<String> = (0..inputs.len()).map(|i| format!("input {i}")).collect();
    grad_check_with(f, inputs, &labels, &GradCheckOptions { step, tolerance, ..Default::default() })
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    labels: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(Error::InvalidArgument(format!("step {} outside [1e-6, 1e-3]", opts.step)));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    let floor = 1e-6 * f0.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let len = inputs[i].len();
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => {
                let mut c = sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut worst = (0.0, 0);
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, c);
            }
        }
        reports.push(InputReport {
            input: i,
            label: labels.get(i).cloned().unwrap_or_else(|| format!("input {i}")),
            checked: coords.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport { inputs: reports, tolerance: opts.tolerance })
}
