//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::ndiff::{Graph, NodeId, ParamStore};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest `|a - n|` over all coordinates.
    pub max_abs_error: f64,
    pub coordinates: Vec<Coordinate>,
}

impl GradCheckReport {
    /// Same comparison with a different denominator floor.
    pub fn max_rel_error_with_floor(&self, floor: f64) -> f64 {
        self.coordinates
            .iter()
            .map(|c| (c.analytic - c.numeric).abs() / (c.analytic.abs() + c.numeric.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    /// Coordinates whose relative error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> usize {
        self.coordinates
            .iter()
            .filter(|c| relative_error(c.analytic, c.numeric) >= tol)
            .count()
    }
}

/// Compare analytic gradients of the scalar built by `f` against central
/// differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h`, over every coordinate of
/// every parameter in `store`. Parameter values are restored afterwards.
///
/// `f` must be deterministic; disable dropout when building the graph.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }

    let mut graph = Graph::new();
    let loss = f(store, &mut graph)?;
    graph.backward_into(loss, store)?;
    drop(graph);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_error: 0.0,
        coordinates: Vec::new(),
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for (k, &a) in analytic[pi].iter().enumerate() {
            let orig = store.get(id).value.data()[k];
            // Divide by the step actually taken after rounding.
            let (hi, lo) = (orig + h, orig - h);
            store.get_mut(id).value.data_mut()[k] = hi;
            let plus = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[k] = lo;
            let minus = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (hi - lo);

            let err = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coordinates.push(Coordinate {
                param: pi,
                index: k,
                analytic: a,
                numeric,
            });
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    Ok(g.value(loss).item())
}
