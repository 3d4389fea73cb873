//! Central finite-difference oracle for tape gradients.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(autodiff: f64, finite_diff: f64) -> f64 {
    (autodiff - finite_diff).abs() / autodiff.abs().max(finite_diff.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Checked,
    /// Frozen parameters receive no tape gradient and are not perturbed.
    FrozenSkipped,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub status: CheckStatus,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry with its `(autodiff, finite-diff)` pair.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn checked_entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            match p.status {
                CheckStatus::Checked => writeln!(
                    f,
                    "{:<40} {:>7} entries  max rel err {:.3e}",
                    p.name, p.entries, p.max_rel_err
                )?,
                CheckStatus::FrozenSkipped => writeln!(f, "{:<40} frozen, skipped", p.name)?,
            }
        }
        write!(
            f,
            "max rel err {:.3e} (tol {:.1e}) -> {}",
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Binder) -> Result<Var>,
{
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let out = f(&binder)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::arg("grad_check", format!("objective has shape {:?}", v.shape())));
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(TensorError::Evaluation(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Compares tape gradients of a scalar objective against central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps` for every entry of every
/// trainable parameter.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Binder) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let out = f(&binder)?;
        let value = tape.item(out);
        if !value.is_finite() {
            return Err(TensorError::Evaluation(format!("objective evaluated to {value}")));
        }
        let grads = tape.backward(out)?;
        binder.gradients(&grads)
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    let mut overall: f64 = 0.0;
    let names: Vec<(String, bool)> =
        store.iter().map(|(n, p)| (n.to_string(), p.trainable)).collect();
    for (name, trainable) in names {
        if !trainable {
            params.push(ParamCheck {
                name,
                status: CheckStatus::FrozenSkipped,
                entries: 0,
                max_rel_err: 0.0,
                worst: None,
            });
            continue;
        }
        let numel = store.value(&name)?.numel();
        let zero = Tensor::zeros(store.value(&name)?.shape());
        let ad = analytic.get(&name).unwrap_or(&zero).clone();
        let mut max_err: f64 = 0.0;
        let mut worst = None;
        for i in 0..numel {
            let orig = store.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = evaluate(&work, &f)?;
            work.value_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = evaluate(&work, &f)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = relative_error(ad.data()[i], fd);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((i, ad.data()[i], fd));
            }
        }
        overall = overall.max(max_err);
        params.push(ParamCheck {
            name,
            status: CheckStatus::Checked,
            entries: numel,
            max_rel_err: max_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_err: overall,
        tolerance: tol,
    })
}

/// Convenience wrapper: checks `f` with respect to plain input tensors,
/// bound as parameters `x0`, `x1`, ...
pub fn check_inputs<F>(inputs: &[Tensor], f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("x{i}"), t.clone(), true)?;
    }
    let n = inputs.len();
    grad_check(
        &store,
        |b| {
            let vars = (0..n)
                .map(|i| b.param(&format!("x{i}")))
                .collect::<Result<Vec<_>>>()?;
            f(b.tape(), &vars)
        },
        eps,
        tol,
    )
}
