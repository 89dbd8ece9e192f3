//! Central finite-difference checks of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Largest relative error found, and where.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or `0` when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < 1e-300 {
        0.0
    } else {
        diff / den
    }
}

/// Compares the reverse-mode gradient of the scalar `loss` against central
/// differences with step `h`, for every free input and every listed parameter.
///
/// `loss(graph, store, inputs)` must build a scalar node from leaf vars that
/// correspond one-to-one to `inputs`.
pub fn check<L>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    h: f64,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = loss(&mut g, store, &vars)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let l = loss(&mut g, store, &vars)?;
    let grads = g.backward(l);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let mut record = |name: String, analytic: Vec<f64>, numeric: Vec<f64>| {
        let e = relative_error(&analytic, &numeric);
        report.checked += analytic.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name;
        }
    };

    let mut inputs_work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let orig = inputs_work[k].data()[i];
            inputs_work[k].data_mut()[i] = orig + h;
            let fp = eval(store, &inputs_work)?;
            inputs_work[k].data_mut()[i] = orig - h;
            let fm = eval(store, &inputs_work)?;
            inputs_work[k].data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        record(format!("input {k}"), analytic, numeric);
    }

    for &pid in params {
        let n = store.value(pid).len();
        let analytic = grads.param(pid).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = orig + h;
            let fp = eval(store, inputs)?;
            store.value_mut(pid).data_mut()[i] = orig - h;
            let fm = eval(store, inputs)?;
            store.value_mut(pid).data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        record(store.name(pid).to_string(), analytic, numeric);
    }
    Ok(report)
}

/// Contracts `out` with a fixed weight tensor so every output element matters:
/// returns `Σ out ⊙ probe`.
pub fn project(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.input(probe.clone());
    let m = g.mul(out, p)?;
    Ok(g.sum_all(m))
}
