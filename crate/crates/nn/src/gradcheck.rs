//! Central finite-difference checks for analytic gradients held in a [`ParamStore`].

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-coordinate `|a - n| / max(|a| + |n|, floor)`.
    pub max_rel_error: f64,
    /// `‖a - n‖ / max(‖a‖, ‖n‖)` over every probed coordinate.
    pub global_rel_error: f64,
    pub worst: String,
    pub probed: usize,
}

/// Compares the gradients already accumulated in `ps` against central
/// differences of `loss`. At most `per_param` coordinates per tensor are
/// probed, spread evenly.
pub fn check_store<T: Scalar>(
    ps: &mut ParamStore<T>,
    per_param: usize,
    eps: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
) -> GradCheckReport {
    let analytic: Vec<Vec<f64>> = ps
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.to_f64().unwrap_or(f64::NAN)).collect())
        .collect();
    let trainable: Vec<bool> = ps.iter().map(|p| p.trainable).collect();
    let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut probed = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        if !trainable[pi] {
            continue;
        }
        let len = grads.len();
        let stride = (len / per_param.max(1)).max(1);
        for ci in (0..len).step_by(stride).take(per_param) {
            let orig = ps.iter().nth(pi).expect("param").value.data()[ci];
            let set = |ps: &mut ParamStore<T>, v: T| {
                ps.iter_mut().nth(pi).expect("param").value.data_mut()[ci] = v;
            };
            set(ps, orig + T::from_f64_lossy(eps));
            let up = loss(ps);
            set(ps, orig - T::from_f64_lossy(eps));
            let down = loss(ps);
            set(ps, orig);
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = format!("{}[{ci}] analytic={a:e} numeric={numeric:e}", names[pi]);
            }
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            probed += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(f64::MIN_POSITIVE);
    GradCheckReport {
        max_rel_error: max_rel,
        global_rel_error: diff2.sqrt() / denom,
        worst,
        probed,
    }
}
