//! Central finite-difference oracle for the autodiff tape.

use super::{Graph, Scalar, Tensor, TensorError, Var};

/// Which coordinates of the inputs are perturbed.
#[derive(Debug, Clone)]
pub enum Coords {
    All,
    /// `(input index, flat element index)` pairs.
    Subset(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, over every
/// coordinate of `x`.
pub fn grad_check<T, E, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, E>,
{
    let report = grad_check_inputs(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        &Coords::All,
        |_, _, a| a,
    )?;
    Ok(report.max_rel_err)
}

/// Multi-input variant. `adjust` post-processes each analytic gradient
/// coordinate before comparison; pass `|_, _, a| a` for an honest check.
pub fn grad_check_inputs<T, E, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: T,
    coords: &Coords,
    adjust: impl Fn(usize, usize, f64) -> f64,
) -> Result<GradCheckReport, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.len()])
        })
        .collect();

    let eval = |probe: &[Tensor<T>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };

    let list: Vec<(usize, usize)> = match coords {
        Coords::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Coords::Subset(list) => list.clone(),
    };

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let two_eps = 2.0 * eps.as_f64();
    for (i, j) in list {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let plus = eval(&probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let minus = eval(&probe)?;
        probe[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / two_eps;
        let a = adjust(i, j, analytic[i][j].as_f64());
        let err = rel_err(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(Worst {
                input: i,
                index: j,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
