use crate::diff::params::{ParamId, ParamStore};
use crate::diff::tape::{evaluate, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Central-difference gradient `(f(p+h) − f(p−h)) / 2h` for every coordinate
/// of every parameter that requires gradients.
pub fn finite_difference_gradient<T, F>(
    store: &ParamStore<T>,
    computation: F,
    step: T,
) -> Result<Gradients<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if step.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument("finite difference step must be > 0".into()));
    }
    let mut work = store.clone();
    let mut out = Gradients {
        grads: vec![None; store.len()],
    };
    let two_h = step + step;
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        let mut g = ndarray::Array2::zeros(store.get(id).value.dim());
        for (idx, slot) in g.indexed_iter_mut() {
            let orig = work.get(id).value[idx];
            work.get_mut(id).value[idx] = orig + step;
            let plus = evaluate(&work, &computation)?;
            work.get_mut(id).value[idx] = orig - step;
            let minus = evaluate(&work, &computation)?;
            work.get_mut(id).value[idx] = orig;
            let d = (plus - minus) / two_h;
            if !d.is_finite() {
                return Err(Error::NonFiniteValue {
                    op: "finite_difference".into(),
                });
            }
            *slot = d;
        }
        out.grads[id.index()] = Some(g);
    }
    Ok(out)
}

/// Per-parameter discrepancy between two gradient sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// `(name, ‖analytic − numeric‖∞ / max(‖numeric‖∞, floor))`
    pub errors: Vec<(String, f64)>,
}

impl GradientReport {
    /// Compares gradients; `floor` keeps the ratio meaningful for near-zero gradients.
    pub fn compare<T: Real>(
        store: &ParamStore<T>,
        analytic: &Gradients<T>,
        numeric: &Gradients<T>,
        floor: f64,
    ) -> Self {
        let mut errors = Vec::new();
        for id in store.ids() {
            let (Some(a), Some(n)) = (analytic.get(id), numeric.get(id)) else {
                continue;
            };
            let diff = a
                .iter()
                .zip(n.iter())
                .map(|(x, y)| (*x - *y).abs().as_f64())
                .fold(0.0, f64::max);
            let scale = n.iter().map(|y| y.abs().as_f64()).fold(floor, f64::max);
            errors.push((store.get(id).name.clone(), diff / scale));
        }
        GradientReport { errors }
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn error_for(&self, name: &str) -> Option<f64> {
        self.errors.iter().find(|e| e.0 == name).map(|e| e.1)
    }
}

/// Analytic and central-difference gradients of `computation`, compared.
pub fn gradient_check<T, F>(
    store: &ParamStore<T>,
    computation: F,
    step: T,
) -> Result<GradientReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = crate::diff::tape::evaluate_with_gradients(store, &computation)?;
    let numeric = finite_difference_gradient(store, &computation, step)?;
    Ok(GradientReport::compare(store, &analytic, &numeric, 1e-6))
}

/// Convenience lookup used by tests: the gradient of parameter `id` as a flat vector.
pub fn flat<T: Real>(g: &Gradients<T>, id: ParamId) -> Vec<T> {
    g.get(id).map(|a| a.iter().copied().collect()).unwrap_or_default()
}
