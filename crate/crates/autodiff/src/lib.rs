//! Small differentiation engine over dense `f64` arrays.
//!
//! Reverse mode is driven by a [`Tape`] that records each primitive as it is
//! evaluated. Forward mode rides on the same tape: a tape built with
//! [`Tape::with_tangents`] carries a tangent next to every value, so a
//! Jacobian-vector product costs one extra pass over each primitive and no
//! finite differencing.
//!
//! ```
//! use mf_autodiff::{grad, NdArray};
//!
//! let g = grad(
//!     |tape, p| {
//!         let sq = tape.square(p[0])?;
//!         tape.sum(sq)
//!     },
//!     &[NdArray::scalar(3.0)],
//! )
//! .unwrap();
//! assert_eq!(g[0].item().unwrap(), 6.0);
//! ```

mod array;
mod error;
mod kernels;
mod tape;

pub use array::NdArray;
pub use error::{AdError, Result};
pub use tape::{Gradients, Tape, Var, GATHER_ZERO};

/// Gradient of a scalar function with respect to each of `params`.
pub fn grad<F>(f: F, params: &[NdArray]) -> Result<Vec<NdArray>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    value_and_grad(f, params).map(|(_, g)| g)
}

/// Loss value together with its gradient.
pub fn value_and_grad<F>(f: F, params: &[NdArray]) -> Result<(f64, Vec<NdArray>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item().map_err(|_| AdError::NotScalar {
        shape: tape.value(loss).shape().to_vec(),
    })?;
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Jacobian-vector product: outputs of `f` at `inputs` together with their
/// directional derivatives along `tangents`.
pub fn jvp<F>(f: F, inputs: &[NdArray], tangents: &[NdArray]) -> Result<(Vec<NdArray>, Vec<NdArray>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    if inputs.len() != tangents.len() {
        return Err(AdError::Invalid {
            op: "jvp",
            reason: format!("{} inputs but {} tangents", inputs.len(), tangents.len()),
        });
    }
    let mut tape = Tape::with_tangents();
    let mut vars = Vec::with_capacity(inputs.len());
    for (x, dx) in inputs.iter().zip(tangents) {
        x.check_same_shape("jvp", dx)?;
        let seeded = x.clone().with_tangent(dx.data().to_vec())?;
        vars.push(tape.constant(seeded)?);
    }
    let outs = f(&mut tape, &vars)?;
    let values = outs
        .iter()
        .map(|&o| tape.value(o).clone().without_tangent())
        .collect();
    let dots = outs.iter().map(|&o| tape.tangent_of(o)).collect();
    Ok((values, dots))
}

/// Vector-Jacobian product: outputs of `f` and the pullback of `cotangents`
/// onto each input.
pub fn vjp<F>(f: F, inputs: &[NdArray], cotangents: &[NdArray]) -> Result<(Vec<NdArray>, Vec<NdArray>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outs = f(&mut tape, &vars)?;
    if outs.len() != cotangents.len() {
        return Err(AdError::Invalid {
            op: "vjp",
            reason: format!("{} outputs but {} cotangents", outs.len(), cotangents.len()),
        });
    }
    let seeds: Vec<(Var, NdArray)> = outs.iter().copied().zip(cotangents.iter().cloned()).collect();
    let grads = tape.backward_seeded(&seeds)?;
    let values = outs.iter().map(|&o| tape.value(o).clone()).collect();
    Ok((values, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Value-identical copy of `x` with its tangent dropped.
///
/// This is the array-level counterpart of [`Tape::stop_gradient`].
pub fn stop_gradient(x: &NdArray) -> NdArray {
    x.clone().without_tangent()
}
