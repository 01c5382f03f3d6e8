use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares reverse-mode gradients against central finite differences.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random weighting so
/// every output component contributes. Returns the maximum over input
/// components of `|autodiff − fd| / max(|fd|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv)?;
        g.value(y).clone()
    };
    let weights = if probe.len() == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut w = Tensor::randn(1, probe.len(), 1.0, &mut rng);
        w.shape = probe.shape.clone();
        Some(w)
    };
    let scalar = |g: &mut Graph, xv: Var| -> Result<Var> {
        let y = f(g, xv)?;
        match &weights {
            None => Ok(y),
            Some(w) => {
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            }
        }
    };
    grad_check_scalar(scalar, x, eps)
}

/// [`grad_check`] for a function that already returns a scalar.
pub fn grad_check_scalar<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check_scalar`] against Ridders-extrapolated central differences,
/// starting from step `h0` and shrinking it by 1.4 per round. Useful when
/// the function value is large next to some of its partial derivatives,
/// where a single small step is dominated by roundoff.
pub fn grad_check_extrapolated<F>(f: F, x: &Tensor, h0: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    const CON: f64 = 1.4;
    const ROUNDS: usize = 10;
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        // Neville tableau; column j removes the h^(2j) error term.
        let mut h = h0;
        let mut prev = vec![central(i, h)?];
        let mut best = prev[0];
        let mut best_err = f64::INFINITY;
        for _ in 1..ROUNDS {
            h /= CON;
            let mut row = vec![central(i, h)?];
            let mut fac = CON * CON;
            for j in 1..=prev.len() {
                let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
                fac *= CON * CON;
                let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
                if e <= best_err {
                    best_err = e;
                    best = v;
                }
                row.push(v);
            }
            let n = row.len();
            let diverging = (row[n - 1] - prev[n - 2]).abs() >= 2.0 * best_err;
            prev = row;
            if diverging {
                break;
            }
        }
        let err = (analytic.data[i] - best).abs() / best.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
