//! Central-difference gradient checking in 64-bit precision.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` against
/// `(f(w + eps) - f(w - eps)) / (2 eps)` on `coords` (all coordinates when
/// `None`).
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64, coords: Option<&[usize]>) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    grad_check_against(|w| f(w).0, &analytic, params, eps, coords)
}

/// [`grad_check`] with the analytic gradient supplied up front, so `loss`
/// only has to evaluate the scalar.
pub fn grad_check_against<L>(
    mut loss: L,
    analytic: &[f64],
    params: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport
where
    L: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut w = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for &i in coords {
        let orig = w[i];
        w[i] = orig + eps;
        let plus = loss(&w);
        w[i] = orig - eps;
        let minus = loss(&w);
        w[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 1 {
            report = GradCheckReport {
                max_rel_error: err,
                worst: i,
                analytic: analytic[i],
                numeric,
                checked: coords.len(),
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{cross_entropy_masked, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward};
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn square() {
        let r = grad_check(|w| (w[0] * w[0], vec![2.0 * w[0]]), &[3.0], 1e-4, None);
        assert!((r.analytic - 6.0).abs() < 1e-12 && (r.numeric - 6.0).abs() < 1e-8);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn one_layer_cross_entropy() {
        // logits = x W + b, loss = masked CE; parameters are W then b
        let (rows, din, v) = (4, 6, 5);
        let x = rand_vec(1, rows * din);
        let targets = [0, 3, 4, 1];
        let mask = [true, true, false, true];
        let f = |p: &[f64]| {
            let w = Tensor::from_f64(&[din, v], &p[..din * v]).unwrap();
            let b = &p[din * v..];
            let mut logits = vec![0.0; rows * v];
            linear_forward(&x, &w, b, &mut logits);
            let (loss, dlogits) = cross_entropy_masked(&logits, v, &targets, &mask).unwrap();
            let mut dw = Tensor::zeros(&[din, v]);
            let mut db = vec![0.0; v];
            linear_backward(&x, &w, &dlogits, None, &mut dw, &mut db);
            let mut g = dw.into_data();
            g.extend(db);
            (loss, g)
        };
        let r = grad_check(f, &rand_vec(2, din * v + v), 1e-4, None);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn layer_norm_and_gelu_backward() {
        let (rows, d) = (3, 7);
        let x = rand_vec(3, rows * d);
        let probe = rand_vec(4, rows * d);
        // scalar objective: sum(probe * gelu(LN(x)))
        let f = |p: &[f64]| {
            let (xs, rest) = p.split_at(rows * d);
            let (gain, bias) = rest.split_at(d);
            let mut y = vec![0.0; rows * d];
            let cache = layer_norm_forward(xs, d, gain, bias, &mut y);
            let loss: f64 = y.iter().zip(&probe).map(|(&a, &b)| gelu(a) * b).sum();
            let dy: Vec<f64> = y.iter().zip(&probe).map(|(&a, &b)| gelu_grad(a) * b).collect();
            let mut dx = vec![0.0; rows * d];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            layer_norm_backward(&dy, d, &cache, gain, &mut dx, &mut dg, &mut db);
            dx.extend(dg);
            dx.extend(db);
            (loss, dx)
        };
        let mut p = x;
        p.extend(rand_vec(5, d).iter().map(|v| 1.0 + 0.5 * v));
        p.extend(rand_vec(6, d));
        let r = grad_check(f, &p, 1e-4, None);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
