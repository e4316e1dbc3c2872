use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamSet, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 24,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

fn eval<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of `f` against central differences on
/// randomly probed trainable coordinates and reports the worst one.
pub fn grad_check<F>(params: &ParamSet, f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(id, _, _)| params.is_trainable(*id))
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let probes = config.probes.min(coords.len());
    let picks: Vec<usize> = if probes == coords.len() {
        (0..coords.len()).collect()
    } else {
        (0..probes).map(|_| rng.random_range(0..coords.len())).collect()
    };
    for pick in picks {
        let (id, i) = coords[pick];
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + config.step;
        let up = eval(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig - config.step;
        let down = eval(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * config.step);
        let analytic = grads.get(id).data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(config.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = params.name(id).to_string();
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
