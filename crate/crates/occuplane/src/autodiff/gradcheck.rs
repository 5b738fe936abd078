//! Central-difference verification of tape gradients.
//!
//! The checker rebuilds the forward graph from scratch for every probe, so it
//! exercises only forward kernels and stays independent of the backward rules
//! it verifies. Always runs in `f64`.

use super::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which input tensor held the worst element.
    pub worst_input: usize,
    /// Flat element index of the worst element.
    pub worst_element: usize,
    pub elements_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences with the given step.
///
/// `build` must construct the same graph for the same input values; it
/// receives one leaf per `(shape, values)` pair and returns the scalar loss.
pub fn grad_check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    let eval = |probe: Option<(usize, usize, f64)>| -> (Vec<Vec<f64>>, f64) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .enumerate()
            .map(|(i, (shape, values))| {
                let mut values = values.clone();
                if let Some((input, element, delta)) = probe {
                    if input == i {
                        values[element] += delta;
                    }
                }
                tape.leaf(shape, values, true).expect("grad_check leaf")
            })
            .collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.numel(loss), 1, "grad_check requires a scalar loss");
        let loss_value = tape.values(loss)[0];
        if probe.is_some() {
            return (Vec::new(), loss_value);
        }
        tape.backward(loss).expect("grad_check backward");
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).expect("leaf gradient").to_vec())
            .collect();
        (grads, loss_value)
    };

    let (analytic, _) = eval(None);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
        elements_checked: 0,
        tolerance,
    };
    for (i, (_, values)) in inputs.iter().enumerate() {
        for e in 0..values.len() {
            let (_, plus) = eval(Some((i, e, step)));
            let (_, minus) = eval(Some((i, e, -step)));
            let central = (plus - minus) / (2.0 * step);
            let a = analytic[i][e];
            let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-6);
            report.elements_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_element = e;
            }
        }
    }
    report
}
