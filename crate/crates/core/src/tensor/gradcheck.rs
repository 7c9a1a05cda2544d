use super::{Graph, NodeId, ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic and central-difference gradients for one
/// scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every parameter element.
    pub max_rel_error: T,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Checks the gradient of a single scalar output. See [`grad_check_many`].
pub fn grad_check<T, F>(store: &ParameterStore<T>, step: T, f: F) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut reports = grad_check_many(store, step, |g, p| Ok(vec![f(g, p)?]))?;
    Ok(reports.remove(0))
}

/// Compares reverse-mode gradients of every output of `f` against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, one parameter element at a time.
///
/// `f` receives a fresh graph and the bound parameter leaves (indexed by
/// [`ParamId`]) and returns one-element output nodes.
pub fn grad_check_many<T, F>(
    store: &ParameterStore<T>,
    step: T,
    f: F,
) -> Result<Vec<GradCheckReport<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<Vec<NodeId>>,
{
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut graph = Graph::new();
    let bound = store.bind(&mut graph);
    let outputs = f(&mut graph, &bound)?;
    let analytic: Vec<Vec<_>> = outputs
        .iter()
        .map(|o| graph.backward(*o).map(|g| g.wrt(&bound)))
        .collect::<Result<_>>()?;

    let evaluate = |s: &ParameterStore<T>| -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let outs = f(&mut g, &b)?;
        outs.iter().map(|o| g.value(*o).item()).collect()
    };

    let floor = T::lit(1e-8);
    let two_h = step + step;
    let mut reports: Vec<GradCheckReport<T>> = outputs
        .iter()
        .map(|_| GradCheckReport {
            max_rel_error: T::zero(),
            worst: None,
            checked: 0,
        })
        .collect();
    let mut work = store.clone();
    for p in 0..store.len() {
        let id = ParamId(p);
        for e in 0..store.get(id).numel() {
            let original = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = original + step;
            let plus = evaluate(&work)?;
            work.get_mut(id).data_mut()[e] = original - step;
            let minus = evaluate(&work)?;
            work.get_mut(id).data_mut()[e] = original;
            for (o, report) in reports.iter_mut().enumerate() {
                let numeric = (plus[o] - minus[o]) / two_h;
                let exact = analytic[o][p].data()[e];
                let denom = exact.abs().max(numeric.abs()).max(floor);
                let rel = (exact - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((store.name(id).to_string(), e));
                }
            }
        }
    }
    Ok(reports)
}
