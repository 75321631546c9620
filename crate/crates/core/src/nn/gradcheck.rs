//! Central-difference verification of analytic gradients.

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over compared coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub compared: usize,
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> GradCheck {
    let include = vec![true; x.len()];
    grad_check_masked(f, x, analytic, h, &include)
}

/// Like [`grad_check`], skipping coordinates where `include` is false
/// (e.g. inputs sitting on a relu kink).
pub fn grad_check_masked(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    include: &[bool],
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    assert_eq!(x.len(), include.len(), "mask length mismatch");
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        compared: 0,
    };
    for i in 0..x.len() {
        if !include[i] {
            continue;
        }
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        out.compared += 1;
        if rel > out.max_rel_error || rel.is_nan() {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    out
}
