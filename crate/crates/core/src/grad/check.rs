use rayon::prelude::*;

use super::{GradError, Tape, Tensor, Var};

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |g_analytic - g_fd| / max(1, |g_analytic|)` over all coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares [`Tape::backward`] against central finite differences with step `h`.
///
/// `f` builds a scalar from the input leaves. The finite-difference side
/// only ever runs `f` forward on a fresh non-recording tape, so it shares
/// nothing with the adjoint rules it checks.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64, GradError> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut x = x.clone();
                if i == which {
                    x.data_mut()[coord] += delta;
                }
                t.param(x)
            })
            .collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    let errors: Vec<f64> = coords
        .par_iter()
        .map(|&(i, c)| {
            let fd = (eval(i, c, h)? - eval(i, c, -h)?) / (2.0 * h);
            let ga = analytic[i].data()[c];
            Ok((ga - fd).abs() / ga.abs().max(1.0))
        })
        .collect::<Result<_, GradError>>()?;
    Ok(GradCheck {
        max_rel_error: errors.into_iter().fold(0.0, f64::max),
        coordinates: coords.len(),
    })
}
