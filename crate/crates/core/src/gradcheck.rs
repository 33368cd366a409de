//! Central-difference gradient verification.
//!
//! `check_gradients` runs a tensor program twice: once to get autodiff
//! gradients, then perturbing parameter components by `±h` to estimate the
//! same derivatives numerically. It reports the max relative error per
//! parameter and never throws on a mismatch. Finite differences are only
//! trustworthy in 64-bit, so the driver is fixed to `f64`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named parameter values handed to a gradient-checked program.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f64>>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.names.push(name.into());
        self.tensors.push(t.param());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// A program builds a fresh graph from parameter values and returns the leaf
/// node of each parameter (aligned with the set) plus the scalar loss.
pub type Program<'a> = dyn Fn(&mut Graph<f64>, &ParamSet) -> (Vec<NodeId>, NodeId) + 'a;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Cap on how many components of each parameter are perturbed; `None`
    /// checks every component. Sampled components are drawn from `seed`.
    pub max_components: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error. Central differences carry
    /// absolute noise around eps_f64 * |loss| / step, so components whose
    /// true gradient sits below this floor are compared in absolute terms:
    /// rel = |ad - fd| / max(|ad|, |fd|, floor).
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_components: None, seed: 0, floor: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Autodiff/numeric pair at the worst component.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Loss value of the program at the given parameter values.
fn eval(program: &Program<'_>, params: &ParamSet) -> f64 {
    let mut g = Graph::new();
    let (_, loss) = program(&mut g, params);
    g.value(loss).item()
}

/// Compares autodiff gradients against central differences for every
/// parameter in `params`.
pub fn check_gradients(
    program: &Program<'_>,
    params: &ParamSet,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    // Autodiff pass.
    let mut g = Graph::new();
    let (nodes, loss) = program(&mut g, params);
    debug_assert_eq!(nodes.len(), params.len());
    g.backward(loss).expect("gradient-check loss must be scalar");
    let auto: Vec<Vec<f64>> = nodes
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| g.grad(*n).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect();

    let mut rng = Rng::new(cfg.seed);
    let mut reports = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (p, name) in params.names.iter().enumerate() {
        let numel = params.tensors[p].numel();
        let indices: Vec<usize> = match cfg.max_components {
            Some(cap) if cap < numel => rng.sample_distinct(numel, cap),
            _ => (0..numel).collect(),
        };
        let mut worst = (0.0, 0.0);
        let mut max_err: f64 = 0.0;
        for &i in &indices {
            let mut plus = params.clone();
            plus.tensors[p].data_mut()[i] += cfg.step;
            let mut minus = params.clone();
            minus.tensors[p].data_mut()[i] -= cfg.step;
            let fd = (eval(program, &plus) - eval(program, &minus)) / (2.0 * cfg.step);
            let ad = auto[p][i];
            let err = rel_err(ad, fd, cfg.floor);
            if err > max_err {
                max_err = err;
                worst = (ad, fd);
            }
        }
        overall = overall.max(max_err);
        reports.push(ParamReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: max_err,
            worst,
        });
    }
    GradCheckReport { params: reports, max_rel_err: overall }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_nearly_exact() {
        // f(x) = x^T A x; central differences are exact for quadratics up to
        // rounding, so the error floor is far below 1e-8.
        let a = Tensor::from_vec(&[3, 3], alloc::vec![
            2.0, 0.5, -1.0,
            0.5, 1.0, 0.25,
            -1.0, 0.25, 3.0,
        ])
        .unwrap();
        let mut params = ParamSet::default();
        params.push("x", Tensor::from_vec(&[3, 1], alloc::vec![0.3, -0.7, 1.1]).unwrap());
        let program = move |g: &mut Graph<f64>, ps: &ParamSet| {
            let x = g.leaf(&ps.tensors[0]);
            let a_node = g.constant(a.clone());
            let xt = g.transpose(x).unwrap();
            let ax = g.matmul(a_node, x).unwrap();
            let q = g.matmul(xt, ax).unwrap();
            (alloc::vec![x], g.sum_all(q))
        };
        let report = check_gradients(&program, &params, &GradCheckConfig::default());
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detached_branch_has_zero_gradient() {
        let mut params = ParamSet::default();
        params.push("x", Tensor::from_vec(&[2], alloc::vec![1.0, 2.0]).unwrap());
        params.push("y", Tensor::from_vec(&[2], alloc::vec![3.0, 4.0]).unwrap());
        let program = |g: &mut Graph<f64>, ps: &ParamSet| {
            let x = g.leaf(&ps.tensors[0]);
            let y = g.leaf(&ps.tensors[1]);
            let yd = g.detach(y);
            let prod = g.mul(x, yd).unwrap();
            (alloc::vec![x, y], g.sum_all(prod))
        };
        // Autodiff assigns no gradient to the detached leaf.
        let mut g = Graph::new();
        let (nodes, loss) = program(&mut g, &params);
        g.backward(loss).unwrap();
        assert!(g.grad(nodes[1]).is_none());
        // The non-detached parameter still verifies.
        let report = check_gradients(&program, &params, &GradCheckConfig::default());
        assert!(report.params[0].max_rel_err < 1e-6);
    }

    #[test]
    fn component_sampling_caps_work() {
        let mut params = ParamSet::default();
        params.push("x", Tensor::from_vec(&[10], alloc::vec![0.1; 10]).unwrap());
        let program = |g: &mut Graph<f64>, ps: &ParamSet| {
            let x = g.leaf(&ps.tensors[0]);
            let sq = g.mul(x, x).unwrap();
            (alloc::vec![x], g.sum_all(sq))
        };
        let cfg = GradCheckConfig { max_components: Some(3), ..Default::default() };
        let report = check_gradients(&program, &params, &cfg);
        assert_eq!(report.params[0].checked, 3);
        assert!(report.passes(1e-6));
    }
}
