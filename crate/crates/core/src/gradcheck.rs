//! Central finite-difference check of analytic gradients.

use crate::model::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a - n| / max(|a| + |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares `analytic` with `(f(p + h) - f(p - h)) / 2h` for every scalar
/// parameter of `params`. `floor` should sit above the rounding noise of the
/// difference quotient, roughly `f64::EPSILON * |f| / h`.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F, step: f64, floor: f64) -> GradCheck
where
    P: ParamSet,
    F: Fn(&P) -> f64,
{
    let names: Vec<String> = params.params().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.params().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut probe = params.clone();
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for (t, name) in names.iter().enumerate() {
        for (k, &a) in grads[t].iter().enumerate() {
            let original = nth(&mut probe, t, k);
            set(&mut probe, t, k, original + step);
            let up = loss(&probe);
            set(&mut probe, t, k, original - step);
            let down = loss(&probe);
            set(&mut probe, t, k, original);
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(a, numeric, floor);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    report
}

fn nth<P: ParamSet>(p: &mut P, tensor: usize, k: usize) -> f64 {
    *p.params_mut()[tensor].iter().nth(k).expect("index within tensor")
}

fn set<P: ParamSet>(p: &mut P, tensor: usize, k: usize, value: f64) {
    *p.params_mut().swap_remove(tensor).iter_mut().nth(k).expect("index within tensor") = value;
}
