//! Small double-precision autodiff engine.
//!
//! A [`Tape`] records a closed set of array operations. Tangents are pushed
//! forward eagerly as nodes are recorded, so a single pass yields both the
//! value and a Jacobian-vector product. [`Tape::backward`] runs reverse mode
//! over the same record. [`Tape::stop_gradient`] cuts both.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates `f` at `inputs` and its directional derivative along `tangents`.
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.len() != tangents.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} tangents",
            inputs.len(),
            tangents.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| tape.input_with_tangent(x.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).clone(), tape.tangent_or_zero(out)))
}

/// Value and gradient of a scalar function with respect to every `params` entry.
pub fn value_and_grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    Ok((value, grads.collect(&tape, &vars)))
}

pub fn grad<F>(f: F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    value_and_grad(f, params).map(|(_, g)| g)
}
