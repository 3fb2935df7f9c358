//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Absolute floor on the relative-error denominator so that entries whose
/// true gradient is essentially zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients produced by [`Graph::backward`] against central
/// differences with step `h` for every element of every input.
///
/// `f` must build a scalar from the given leaves and be a pure function of
/// their values. `max_coords` limits the elements probed per input (an evenly
/// strided subset) for large inputs.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ii, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let step = match max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = t.data()[e];
            probe[ii].data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe[ii].data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe[ii].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ii].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((ii, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Scalar probe `Σ r ⊙ x` with fixed pseudo-random weights, used to turn a
/// tensor output into a loss whose gradient exercises every element.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w = Tensor::from_fn(&shape, |_| {
        // xorshift64*
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        let r = state.wrapping_mul(0x2545_F491_4F6C_DD1D);
        (r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    });
    let wv = g.input(w);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}
