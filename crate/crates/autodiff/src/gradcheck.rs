//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates to probe numerically.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate of every tensor.
    All,
    /// A seeded sample of at most `per_tensor` coordinates from each tensor.
    /// Large nets are checked this way; the sample is deterministic.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error denominator floor; below it the comparison degrades to
    /// a scaled absolute check so finite-difference noise on near-zero
    /// gradients does not dominate.
    pub floor: f64,
    pub selection: CoordSelection,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            selection: CoordSelection::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (tensor name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of a scalar-valued builder against
/// central differences, coordinate by coordinate, and reports the worst
/// relative error.
pub fn grad_check<S, F>(
    build: F,
    inputs: &BTreeMap<String, Tensor<S>>,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &BTreeMap<String, Var>) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, tensor) in inputs {
        vars.insert(name.clone(), tape.input(tensor.clone(), true));
    }
    let y = build(&mut tape, &vars)?;
    let y_val = tape.value(y).item()?.to_f64c();
    if !y_val.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check objective".into(),
        });
    }
    tape.backward(y)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, &var) in &vars {
        let g = tape
            .grad_of(var)
            .map(|g| g.iter().map(|v| v.to_f64c()).collect())
            .unwrap_or_else(|| vec![0.0; inputs[name].numel()]);
        analytic.insert(name.clone(), g);
    }

    // Probes keep requires_grad on so builders that nest `Tape::grad`
    // (gradient-penalty style objectives) see real inner gradients.
    let eval = |perturbed: &BTreeMap<String, Tensor<S>>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, tensor) in perturbed {
            vars.insert(name.clone(), tape.input(tensor.clone(), true));
        }
        let y = build(&mut tape, &vars)?;
        let v = tape.value(y).item()?.to_f64c();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check finite-difference probe".into(),
            });
        }
        Ok(v)
    };

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: BTreeMap<String, Tensor<S>> = inputs.clone();
    for (name, tensor) in inputs {
        let numel = tensor.numel();
        let coords: Vec<usize> = match opts.selection {
            CoordSelection::All => (0..numel).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                if per_tensor >= numel {
                    (0..numel).collect()
                } else {
                    // Partial Fisher-Yates over the index range, seeded per
                    // tensor name so samples stay stable across runs.
                    let mut rng = Rng::new(seed ^ fnv1a(name.as_bytes()));
                    let mut idx: Vec<usize> = (0..numel).collect();
                    for i in 0..per_tensor {
                        let j = i + rng.below(numel - i);
                        idx.swap(i, j);
                    }
                    idx.truncate(per_tensor);
                    idx
                }
            }
        };
        for &i in &coords {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + S::c(h);
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - S::c(h);
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[name][i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
