use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let t = tape.value(loss);
    if !t.is_scalar() {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compare the tape gradient of `f` w.r.t. parameter `id` against central
/// differences with step `h`.
///
/// Returns `max_j |autodiff_j - fd_j| / max(1e-8, |fd_j|)`. All gradients in
/// `store` are zeroed as a side effect.
pub fn finite_difference_check<F>(store: &mut ParamStore, id: ParamId, h: f64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_difference_check", format!("step must be > 0, got {h}")));
    }
    let first = eval(store, &f)?;
    let second = eval(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let n = store.get(id).len();
    let analytic = store
        .get(id)
        .grad()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; n]);
    store.zero_grads();

    let mut worst = 0.0f64;
    for (j, ad) in analytic.iter().enumerate() {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let fp = eval(store, &f);
        store.get_mut(id).data_mut()[j] = orig - h;
        let fm = eval(store, &f);
        store.get_mut(id).data_mut()[j] = orig;
        let fd = (fp? - fm?) / (2.0 * h);
        worst = worst.max((ad - fd).abs() / fd.abs().max(1e-8));
    }
    Ok(worst)
}
