//! Central finite-difference gradient checking.

use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` with `(loss(p + h·e_i) − loss(p − h·e_i)) / 2h` for
/// every parameter entry `i`.
pub fn check_gradients<P, F>(params: &P, analytic: &P, step: f64, loss: F) -> GradCheckReport
where
    P: ParamSet<f64>,
    F: Fn(&P) -> f64,
{
    let base = params.flatten();
    let grads = analytic.flatten();
    assert_eq!(base.len(), grads.len(), "gradient layout differs from parameters");
    let mut names = Vec::with_capacity(base.len());
    params.visit(&mut |name, _, m| names.extend((0..m.as_slice().len()).map(|i| (name.to_string(), i))));

    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for i in 0..flat.len() {
        flat[i] = base[i] + step;
        probe.assign_flat(&flat);
        let up = loss(&probe);
        flat[i] = base[i] - step;
        probe.assign_flat(&flat);
        let down = loss(&probe);
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(grads[i], numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst = names[i].clone();
        }
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impl_param_set;
    use crate::tensor::Mat;

    #[derive(Debug, Clone)]
    struct Quad<T> {
        x: Mat<T>,
    }
    impl_param_set!(Quad { x: Weight });

    #[test]
    fn exact_gradient_passes_and_wrong_gradient_fails() {
        let p = Quad {
            x: Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]),
        };
        let loss = |q: &Quad<f64>| q.x.as_slice().iter().map(|v| v * v * v).sum::<f64>();
        let good = Quad {
            x: Mat::from_vec(1, 3, vec![0.75, 3.0, 12.0]),
        };
        let r = check_gradients(&p, &good, 1e-4, loss);
        assert!(r.max_rel_err < 1e-7, "{r:?}");
        assert_eq!(r.checked, 3);

        let bad = Quad {
            x: Mat::from_vec(1, 3, vec![0.75, 3.5, 12.0]),
        };
        let r = check_gradients(&p, &bad, 1e-4, loss);
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst, ("x".to_string(), 1));
    }
}
