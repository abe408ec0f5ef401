use super::{Graph, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::Scalar;

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the backward-pass gradient of `f` at `x` with central
/// differences of step `h` and returns the largest relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is perturbed.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>], grads: bool| -> Result<(f64, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf_as(x, grads)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(shape_err("grad_check function must return a scalar"));
        }
        let value = g.item(out).as_f64();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.grad(v).map_or_else(|| vec![T::zero(); x.numel()], <[T]>::to_vec))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = T::of(orig.as_f64() + h);
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = T::of(orig.as_f64() - h);
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grads[i].as_f64(), numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.square(v);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, _| Ok(g.constant(&[], vec![5.0]).unwrap()),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 2.0) - 0.5).abs() < 1e-15);
    }
}
