//! Directional central-difference gradient checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Directions whose analytic and numeric derivatives were compared.
    pub checked: usize,
    /// Directions dropped because the probe crossed a non-smooth point.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` for each checked direction.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64, min_checked: usize) -> bool {
        self.checked >= min_checked && self.max_rel_err <= tol
    }
}

fn shifted(params: &ParamSet, dir: &[Tensor], h: f64) -> ParamSet {
    let mut p = params.clone();
    for (t, d) in p.tensors_mut().zip(dir) {
        for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
            *x += h * dx;
        }
    }
    p
}

/// Compares `<grad f, d>` with `(f(p + h d) - f(p - h d)) / 2h` along random
/// unit directions `d`. `f` builds a scalar from the given parameters and
/// returns it with the binding of those parameters. Directions whose probes
/// change the sign pattern of any abs/leaky-ReLU input are skipped, up to
/// `10 * directions` attempts in total.
pub fn check_directions<F, R>(
    params: &ParamSet,
    f: F,
    directions: usize,
    h: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamSet) -> (Var, Bound),
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let (root, bound) = f(&mut g, params);
    let grads = params.collect_grads(&bound, &g.backward(root));
    let base_sig = g.kink_signature(root);

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        pairs: Vec::new(),
    };
    let mut attempts = 0;
    while report.checked < directions && attempts < 10 * directions {
        attempts += 1;
        let mut dir: Vec<Tensor> = Vec::with_capacity(params.len());
        for t in params.tensors() {
            let data = (0..t.numel())
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            dir.push(Tensor::new(t.shape().to_vec(), data).expect("same shape"));
        }
        let norm = dir.iter().map(|d| d.dot(d)).sum::<f64>().sqrt();
        for d in &mut dir {
            *d = d.map(|x| x / norm);
        }
        let eval = |step: f64| {
            let mut g = Graph::new();
            let p = shifted(params, &dir, step);
            let (root, _) = f(&mut g, &p);
            (g.value(root).item(), g.kink_signature(root))
        };
        let (fp, sp) = eval(h);
        let (fm, sm) = eval(-h);
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max((analytic - numeric).abs() / scale);
        report.pairs.push((analytic, numeric));
        report.checked += 1;
    }
    report
}
