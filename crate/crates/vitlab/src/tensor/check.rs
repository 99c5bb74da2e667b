//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::{DType, Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckRow> {
        self.rows.iter().filter(move |r| r.rel_error >= self.tolerance)
    }
}

/// Relative error with an absolute floor: central differences carry
/// roundoff noise of roughly |f| * ulp / step, so tiny matching gradients
/// are not penalized.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Check a scalar-valued tensor function at `x` by comparing the graph's
/// analytic gradient against central differences with the given step.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let x = x.to_dtype(DType::F64).tracked();
    let analytic = {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let loss = f(&mut g, xid)?;
        let grads = g.backward(loss)?;
        grads.get_or_zeros(xid, x.numel())
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(probe.clone().with_tracking(false));
        let loss = f(&mut g, xid)?;
        Ok(g.value(loss).item())
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.set(i, orig + step);
        let fp = eval(&probe)?;
        probe.set(i, orig - step);
        let fm = eval(&probe)?;
        probe.set(i, orig);
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    Ok(gradient_check_against(&analytic, &numeric, tolerance))
}

/// Compare an externally supplied analytic gradient against a numeric one.
/// Used both by [`gradient_check`] and by fault-injection tests that feed
/// deliberately wrong gradients.
pub fn gradient_check_against(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut rows = Vec::with_capacity(analytic.len());
    let mut max_rel = 0.0f64;
    for i in 0..analytic.len() {
        let e = rel_error(analytic[i], numeric[i]);
        max_rel = max_rel.max(e);
        rows.push(GradCheckRow { index: i, analytic: analytic[i], numeric: numeric[i], rel_error: e });
    }
    GradCheckReport { rows, max_rel_error: max_rel, tolerance }
}
