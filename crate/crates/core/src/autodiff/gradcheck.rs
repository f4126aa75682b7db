use super::{ParamStore, Scalar, Tape, Var};
use crate::error::Result;

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error with the denominator floored at 1, so gradients of
/// magnitude below one are compared absolutely.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares reverse-mode gradients of a scalar function of `store` with
/// central differences `(f(θ+h) − f(θ−h)) / 2h`, element by element.
///
/// `f` must be deterministic (dropout off) and must build its whole
/// computation on the tape it is handed.
pub fn finite_difference_check<T, F>(
    store: &mut ParamStore<T>,
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &analytic_store)?;
        tape.backward(loss)?.accumulate_into(&mut analytic_store);
    }

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).data()[0].as_f64())
    };

    let step = T::from_f64_lossy(h);
    let mut report = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut worst = ParamGradError {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original - step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = analytic_store.get(id).grad.data()[i].as_f64();
            let err = relative_error(analytic, numeric);
            if err > worst.max_rel_error || i == 0 {
                worst = ParamGradError {
                    max_rel_error: err,
                    worst_index: i,
                    analytic,
                    numeric,
                    ..worst
                };
            }
        }
        report.push(worst);
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identity_sum_has_zero_error() {
        // Dyadic values and step make the central difference exact.
        let mut store = ParamStore::<f64>::new();
        store
            .add(
                "x",
                Tensor::from_f64(&[4], &[0.5, -1.25, 2.0, 0.75]).unwrap(),
            )
            .unwrap();
        let report = finite_difference_check(
            &mut store,
            |tape, s| {
                let x = tape.param(s, s.find("x").unwrap())?;
                tape.sum(x)
            },
            1.0 / 1024.0,
            1e-12,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn detects_wrong_gradient() {
        // The first (analytic) call sees slope 1, every later call slope 3.
        let mut store = ParamStore::<f64>::new();
        store
            .add("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();
        let mut calls = 0u32;
        let report = finite_difference_check(
            &mut store,
            |tape, s| {
                calls += 1;
                let x = tape.param(s, s.find("x").unwrap())?;
                let y = tape.scale(x, if calls > 1 { 3.0 } else { 1.0 })?;
                tape.sum(y)
            },
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
