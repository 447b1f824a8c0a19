use super::{Graph, Result, Tensor, Var};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `point`
/// against central differences with step `h`, returning the maximum
/// relative error over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g
        .gradients(y)?
        .get(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_nearly_exact() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &Tensor::from_vec(vec![3.0]),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let coeffs = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
        let err = grad_check(
            |g, x| {
                let c = g.constant(coeffs.clone());
                let p = g.mul(c, x)?;
                Ok(g.sum(p))
            },
            &Tensor::from_vec(vec![1.0, 2.0, -1.0]),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(1.0, 1.001) - 0.001 / 2.001).abs() < 1e-15);
    }
}
