//! Central finite-difference verification of tape gradients.
//!
//! Checks run on a recording tape; perturbed evaluations replay its
//! stop-gradient and reversal sites (see [`crate::autograd::Sites`]).

use rand::seq::index::sample;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Streams;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub samples_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            samples_per_tensor: Some(6),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    /// Fails with the offending coordinate when the error exceeds `tol`.
    pub fn ensure(&self, tol: f64) -> Result<()> {
        match &self.worst {
            Some(w) if self.max_rel_error > tol => Err(Error::GradCheck {
                name: w.name.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
                rel: self.max_rel_error,
            }),
            _ => Ok(()),
        }
    }
}

/// Below `FLOOR` in magnitude, errors are measured absolutely: that is the
/// scale of roundoff in a central difference of an O(1) loss.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks the gradient of a scalar program with respect to every parameter
/// in `store` accepted by `filter`.
pub fn grad_check_params<F, P>(
    store: &ParamStore<f64>,
    program: F,
    filter: P,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let mut tape = Tape::recording();
    let loss = program(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.params(&tape, store);
    let sites = tape.recorded_sites();

    let mut rng = Streams::new(cfg.seed).stream("gradcheck");
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::replaying(sites.clone());
        let l = program(&mut tape, s)?;
        Ok(tape.value(l).item())
    };
    for (id, name, tensor) in store.iter() {
        if !filter(name) {
            continue;
        }
        let n = tensor.len();
        let coords: Vec<usize> = match cfg.samples_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = tensor.data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Worst {
                    name: name.to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of a program over plain input tensors.
pub fn grad_check<F>(
    program: F,
    inputs: &[(&str, Tensor<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.insert(*name, t.clone())?;
    }
    grad_check_params(
        &store,
        |tape, s| {
            let vars: Vec<Var> = s.ids().map(|id| tape.param(s, id)).collect();
            program(tape, &vars)
        },
        |_| true,
        cfg,
    )
}
