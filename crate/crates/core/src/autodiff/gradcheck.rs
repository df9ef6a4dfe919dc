use std::collections::{BTreeMap, HashMap};

use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub per_parameter: BTreeMap<String, f64>,
    pub elements_checked: usize,
}

/// Named parameters a loss closure reads from.
pub trait ParamSource {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>>;
}

impl ParamSource for Vec<(String, Tensor<f64>)> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl ParamSource for BTreeMap<String, Tensor<f64>> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.get_mut(name)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Central-difference gradient check of every parameter the loss binds via
/// [`Graph::param`].
///
/// `loss_fn` must be deterministic; two unperturbed evaluations that differ
/// bit-wise yield [`AutodiffError::NonDeterministic`].
pub fn grad_check<P, E, F>(mut loss_fn: F, params: &mut P, eps: f64) -> Result<GradientCheckReport, E>
where
    P: ParamSource,
    E: From<AutodiffError>,
    F: FnMut(&Graph<f64>, &P) -> Result<Var, E>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(AutodiffError::Contract(format!("eps {eps} outside [1e-6, 1e-3]")).into());
    }
    let g = Graph::new();
    let loss = loss_fn(&g, params)?;
    let base = g.item(loss);
    g.backward(loss)?;
    let analytic: HashMap<String, Tensor<f64>> = g.param_grads().into_iter().collect();
    let names: Vec<String> = g.bound_params().into_iter().map(|(n, _)| n).collect();
    drop(g);

    let mut eval = |p: &P| -> Result<f64, E> {
        let g = Graph::new();
        let l = loss_fn(&g, p)?;
        Ok(g.item(l))
    };
    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut report = GradientCheckReport {
        max_rel_error: 0.0,
        per_parameter: BTreeMap::new(),
        elements_checked: 0,
    };
    for name in names {
        let n_elem = params
            .tensor_mut(&name)
            .ok_or_else(|| AutodiffError::Contract(format!("parameter {name} not in source")))?
            .len();
        let mut worst = 0f64;
        for k in 0..n_elem {
            let orig = params.tensor_mut(&name).expect("checked").data()[k];
            params.tensor_mut(&name).expect("checked").data_mut()[k] = orig + eps;
            let plus = eval(params)?;
            params.tensor_mut(&name).expect("checked").data_mut()[k] = orig - eps;
            let minus = eval(params)?;
            params.tensor_mut(&name).expect("checked").data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[&name].data()[k];
            worst = worst.max(rel_error(a, numeric));
            report.elements_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_parameter.insert(name, worst);
    }
    Ok(report)
}
