//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-7, 1e-3]`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            denom_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: ParamId,
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding resolution of `numeric`; see [`difference_resolution`].
    pub resolution: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub trainable: bool,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Largest `|gradient|` left in the accumulator after the check.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
    pub params: Vec<ParamSummary>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// How far a central difference can sit from the true slope through
/// rounding alone: each loss value carries about `eps * |f|` of error, and
/// the difference divides it by `2h`. Below this the reference itself cannot
/// tell two gradients apart.
pub fn difference_resolution(plus: f64, minus: f64, h: f64) -> f64 {
    f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h)
}

/// `|analytic - numeric|` beyond the reference's `resolution`, relative to
/// the larger magnitude, which is clamped below at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, resolution: f64, floor: f64) -> f64 {
    let diff = ((analytic - numeric).abs() - resolution).max(0.0);
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(store: &ParamStore, loss_fn: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::dim("grad_check loss", v.shape(), (1, 1)));
    }
    Ok(v[(0, 0)])
}

/// Compares tape gradients of `loss_fn` against central differences for
/// every entry of every trainable parameter.
///
/// The store's gradient accumulators are zeroed and then hold the tape
/// gradient on return; frozen parameters keep zero accumulators. Parameter
/// values are restored bit-for-bit after each probe.
pub fn grad_check(
    store: &mut ParamStore,
    opts: GradCheckOptions,
    loss_fn: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    let h = opts.step;

    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let value = tape.value(loss)[(0, 0)];
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check base loss".into()));
        }
        let grads = tape.backward(loss)?;
        (value, grads.params().to_vec())
    };
    store.zero_grads();
    store.accumulate(&grads)?;

    let mut report = GradCheckReport {
        loss,
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        params: Vec::new(),
    };

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let name = store.name(id).to_string();
        let (rows, cols) = p.value.shape();
        let mut summary = ParamSummary {
            name: name.clone(),
            trainable: p.trainable,
            entries: p.len(),
            max_rel_err: 0.0,
            max_abs_grad: p.grad.as_slice().iter().fold(0.0, |m, g| m.max(g.abs())),
        };
        if !p.trainable {
            report.params.push(summary);
            continue;
        }
        for k in 0..rows * cols {
            let original = store.get(id).value.as_slice()[k];
            store.get_mut(id).value.as_mut_slice()[k] = original + h;
            let plus = eval(store, &loss_fn);
            store.get_mut(id).value.as_mut_slice()[k] = original - h;
            let minus = eval(store, &loss_fn);
            store.get_mut(id).value.as_mut_slice()[k] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check loss probing {name}[{}, {}]",
                    k / cols,
                    k % cols
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad.as_slice()[k];
            let resolution = difference_resolution(plus, minus, h);
            let rel_err = relative_error(analytic, numeric, resolution, opts.denom_floor);
            report.checked += 1;
            summary.max_rel_err = summary.max_rel_err.max(rel_err);
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                report.worst = Some(EntryCheck {
                    param: id,
                    name: name.clone(),
                    row: k / cols,
                    col: k % cols,
                    analytic,
                    numeric,
                    resolution,
                    rel_err,
                });
            }
        }
        report.params.push(summary);
    }
    Ok(report)
}
