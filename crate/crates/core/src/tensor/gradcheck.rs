//! Central-difference gradient verification in 64-bit arithmetic.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::TrainRng;

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked elements.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Which coordinates [`grad_check_params`] perturbs.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// `count` coordinates drawn with a uniformly chosen input, then a
    /// uniformly chosen element, so small tensors are not starved.
    Sample {
        count: usize,
        seed: u64,
    },
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks the gradient of scalar `f` at `x` with central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = grad_check_params(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
        Coverage::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input variant: `f` receives one leaf per entry of `inputs`, in order.
pub fn grad_check_params<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = vals.iter().map(|v| tape.constant(v)).collect();
        let out = f(&tape, &vars)?.value();
        if out.numel() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("f must be scalar, got {:?}", out.shape()),
            ));
        }
        Ok(out.item())
    };

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|v| tape.leaf(&v.clone().with_requires_grad(true)))
            .collect();
        let loss = f(&tape, &vars)?;
        let grads = loss.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| grads.get(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let coords: Vec<(usize, usize)> = match coverage {
        Coverage::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(t, x)| (0..x.numel()).map(move |e| (t, e)))
            .collect(),
        Coverage::Sample { count, seed } => {
            let mut rng = TrainRng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let t = rng.gen_range(0..inputs.len());
                    (t, rng.gen_range(0..inputs[t].numel()))
                })
                .collect()
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (t, e) in coords {
        let orig = work[t].data()[e];
        work[t].data_mut()[e] = orig + h;
        let plus = eval(&work)?;
        work[t].data_mut()[e] = orig - h;
        let minus = eval(&work)?;
        work[t].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative(analytic[t].data()[e], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = (t, e);
        }
        report.checked += 1;
    }
    Ok(report)
}
