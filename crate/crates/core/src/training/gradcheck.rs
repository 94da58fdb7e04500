use crate::float::Float;
use crate::lm::ParamSet;

/// `|a − b| / max(|a|, |b|, 1e-6)`. The floor keeps entries whose true
/// gradient is essentially zero from dominating through rounding noise.
pub fn relative_error(a: Float, b: Float) -> Float {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Maximum relative error between `analytic` and central finite differences
/// of `loss` around `params`, over every `stride`-th parameter.
pub fn grad_check<P: ParamSet + Clone>(
    params: &P,
    analytic: &P,
    mut loss: impl FnMut(&P) -> Float,
    epsilon: Float,
    stride: usize,
) -> Float {
    let g = analytic.flatten();
    let mut worst: Float = 0.0;
    for idx in (0..g.len()).step_by(stride.max(1)) {
        let nudge = |p: &mut P, delta: Float| {
            let mut k = 0;
            p.visit_mut(&mut |_, t| {
                if (k..k + t.len()).contains(&idx) {
                    t[idx - k] += delta;
                }
                k += t.len();
            });
        };
        let mut plus = params.clone();
        nudge(&mut plus, epsilon);
        let mut minus = params.clone();
        nudge(&mut minus, -epsilon);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * epsilon);
        worst = worst.max(relative_error(g[idx], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[derive(Clone)]
    struct Linear(Vec<Float>);

    impl ParamSet for Linear {
        fn visit(&self, f: &mut dyn FnMut(&str, &[Float])) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Float])) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn quadratic_loss_of_linear_model_is_exact() {
        // L(w) = Σ_i (x_i · w − y_i)^2
        let xs = [[1.0, 2.0, -1.0], [0.5, -0.3, 2.0], [3.0, 0.0, 1.0]];
        let ys = [0.7, -1.2, 2.5];
        let w = Linear(vec![0.1, -0.4, 0.9]);
        let loss = |p: &Linear| -> Float {
            xs.iter()
                .zip(ys)
                .map(|(x, y)| {
                    let r: Float = x.iter().zip(&p.0).map(|(a, b)| a * b).sum::<Float>() - y;
                    r * r
                })
                .sum()
        };
        let mut g = vec![0.0; 3];
        for (x, y) in xs.iter().zip(ys) {
            let r: Float = x.iter().zip(&w.0).map(|(a, b)| a * b).sum::<Float>() - y;
            for j in 0..3 {
                g[j] += 2.0 * r * x[j];
            }
        }
        let err = grad_check(&w, &Linear(g), loss, 1e-5, 1);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let w = Linear(vec![1.0, 2.0]);
        let err = grad_check(
            &w,
            &Linear(vec![2.0, 0.0]),
            |p| p.0[0] * p.0[0] + p.0[1] * p.0[1],
            1e-5,
            1,
        );
        assert!(err > 0.5);
    }
}
