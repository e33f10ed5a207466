use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |autodiff - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
    /// Coordinates whose probe at `h` straddled a kink and were judged at a
    /// smaller step instead (always 0 for [`finite_diff_check_at`]).
    pub refined: usize,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let root = f(&mut g, xv)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// Checks only the listed flat coordinates of `x`.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check(f, x, h, coords, None)
}

/// Like [`finite_diff_check_at`], for piecewise-smooth functions. A
/// coordinate whose error at `h` reaches `tolerance` is re-probed at `h/10`
/// and `h/100` if its one-sided slopes at `h` disagree (a kink lies inside
/// the probe). The best refined error then stands in for it. A wrong
/// gradient on a smooth stretch has matching one-sided slopes and is never
/// refined.
pub fn finite_diff_check_kinked_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize], tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check(f, x, h, coords, Some(tolerance))
}

fn check<F>(f: F, x: &Tensor, h: f64, coords: &[usize], refine: Option<f64>) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    g.backward(root)?;
    let auto = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = (0.0, 0);
    let mut refined = 0;
    let mut probe = x.clone();
    for &i in coords {
        let a = auto.data()[i];
        let (mut err, plus, minus) = probe_at(&f, &mut probe, i, h, a)?;
        if let Some(tol) = refine {
            let fwd = (plus - first) / h;
            let bwd = (first - minus) / h;
            let central_gap = (a - 0.5 * (fwd + bwd)).abs();
            if err >= tol && (fwd - bwd).abs() >= 1.5 * central_gap {
                let mut best = err;
                for step in [h / 10.0, h / 100.0] {
                    best = best.min(probe_at(&f, &mut probe, i, step, a)?.0);
                }
                if best < tol {
                    refined += 1;
                }
                err = best;
            }
        }
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        checked: coords.len(),
        refined,
    })
}

/// Central difference at coordinate `i`: (relative error, f(x+h), f(x-h)).
fn probe_at<F>(f: &F, probe: &mut Tensor, i: usize, h: f64, auto: f64) -> Result<(f64, f64, f64)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let plus = eval(f, probe)?;
    probe.data_mut()[i] = orig - h;
    let minus = eval(f, probe)?;
    probe.data_mut()[i] = orig;
    let numeric = (plus - minus) / (2.0 * h);
    Ok(((auto - numeric).abs() / numeric.abs().max(1.0), plus, minus))
}
