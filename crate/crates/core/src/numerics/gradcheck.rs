//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::layers::softmax_cross_entropy;
use crate::numerics::{LayerSpec, Network, ParamVector, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Scalar loss applied to a network output during a gradient check.
#[derive(Clone, Debug)]
pub enum LossSpec {
    /// Mean softmax cross-entropy against per-row labels.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// `0.5 * ||output - target||^2`
    Quadratic { target: Tensor },
    /// Sum of all outputs.
    Sum,
    /// `<output, weights>`
    Weighted { weights: Tensor },
}

impl LossSpec {
    /// Loss value and its gradient with respect to the output.
    pub fn eval(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossSpec::SoftmaxCrossEntropy { labels } => {
                let (loss, grad, _) = softmax_cross_entropy(output, labels)?;
                Ok((loss, grad))
            }
            LossSpec::Quadratic { target } => {
                if target.shape() != output.shape() {
                    return Err(Error::Input("quadratic target shape mismatch".into()));
                }
                let mut diff = output.clone();
                diff.axpy(-1.0, target);
                Ok((0.5 * diff.norm_sq(), diff))
            }
            LossSpec::Sum => Ok((output.data().iter().sum(), Tensor::full(output.shape(), 1.0))),
            LossSpec::Weighted { weights } => {
                if weights.shape() != output.shape() {
                    return Err(Error::Input("weight shape mismatch".into()));
                }
                Ok((output.dot(weights), weights.clone()))
            }
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// Max relative error per checked tensor, in canonical order. The input
    /// gradient, when checked, appears as `input`.
    pub max_errors: Vec<(String, f64)>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.max_errors
            .iter()
            .map(|(n, e)| (n.as_str(), *e))
            .fold(None, |best, cur| match best {
                Some((_, e)) if e >= cur.1 => best,
                _ => Some(cur),
            })
    }

    /// Names of tensors whose error exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.max_errors
            .iter()
            .filter(|(_, e)| *e > self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Central differences of `f` with respect to every scalar of `params`.
pub fn numeric_gradient<F>(params: &ParamVector, h: f64, mut f: F) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = params.get(&name).expect("name from params").data()[i];
            work.get_mut(&name).expect("same layout").data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[i] = orig;
            grads.get_mut(&name).expect("same layout").data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Central differences of `f` with respect to every scalar of `x`.
pub fn numeric_input_gradient<F>(x: &Tensor, h: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut work = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work.data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

fn tensor_max_error(name: &str, analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if let Some(i) = analytic.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("analytic gradient {name}[{i}]"),
        });
    }
    if let Some(i) = numeric.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("numeric gradient {name}[{i}]"),
        });
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max))
}

/// Compares two gradients tensor by tensor.
pub fn compare(
    analytic: &ParamVector,
    numeric: &ParamVector,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !analytic.same_layout(numeric) {
        return Err(Error::Input("gradient layouts differ".into()));
    }
    let mut max_errors = Vec::new();
    for ((name, a), (_, b)) in analytic.iter().zip(numeric.iter()) {
        max_errors.push((name.clone(), tensor_max_error(name, a, b)?));
    }
    let passed = max_errors.iter().all(|(_, e)| *e <= tolerance);
    Ok(GradCheckReport {
        tolerance,
        max_errors,
        passed,
    })
}

/// Checks backward-pass gradients (parameters and input) of `layers` under
/// `loss` against central finite differences with step [`FD_STEP`].
pub fn grad_check(
    layers: &[LayerSpec],
    params: &ParamVector,
    input: &Tensor,
    loss: &LossSpec,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let net = Network::new(layers.to_vec(), &input.shape()[1..])?;
    let (out, tape) = net.forward(params, input)?;
    let (_, upstream) = loss.eval(&out)?;
    let (analytic, dx) = net.backward(params, tape, &upstream)?;

    let numeric = numeric_gradient(params, FD_STEP, |p| loss.eval(&net.infer(p, input)?).map(|r| r.0))?;
    let mut report = compare(&analytic, &numeric, tolerance)?;

    let numeric_dx = numeric_input_gradient(input, FD_STEP, |x| {
        loss.eval(&net.infer(params, x)?).map(|r| r.0)
    })?;
    let input_err = tensor_max_error("input", &dx, &numeric_dx)?;
    report.max_errors.push(("input".into(), input_err));
    report.passed &= input_err <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_sum_has_all_ones_gradient() {
        let layers = vec![LayerSpec::Relu];
        let x = Tensor::new(vec![1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let none = ParamVector::new();
        let report = grad_check(&layers, &none, &x, &LossSpec::Sum, 1e-4).unwrap();
        assert!(report.passed);
        let net = Network::new(layers, &[3]).unwrap();
        let (y, tape) = net.forward(&none, &x).unwrap();
        let (_, dx) = net
            .backward(&none, tape, &Tensor::full(y.shape(), 1.0))
            .unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_linear_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers = vec![LayerSpec::linear(4, 3)];
        let net = Network::new(layers.clone(), &[4]).unwrap();
        let params = net.init_params(&mut rng);
        let x = Tensor::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0));
        let target = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let report = grad_check(&layers, &params, &x, &LossSpec::Quadratic { target }, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_entry_is_reported_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::new(vec![LayerSpec::linear(3, 2)], &[3]).unwrap();
        let params = net.init_params(&mut rng);
        let x = Tensor::from_fn(&[1, 3], |_| rng.random_range(0.5..1.0));
        let loss = LossSpec::Sum;
        let (out, tape) = net.forward(&params, &x).unwrap();
        let (_, up) = loss.eval(&out).unwrap();
        let (mut analytic, _) = net.backward(&params, tape, &up).unwrap();
        analytic.get_mut("00.weight").unwrap().data_mut()[1] *= 2.0;
        let numeric =
            numeric_gradient(&params, FD_STEP, |p| loss.eval(&net.infer(p, &x)?).map(|r| r.0))
                .unwrap();
        let report = compare(&analytic, &numeric, 1e-4).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing(), vec!["00.weight"]);
    }

    #[test]
    fn non_finite_gradient_is_hard_failure() {
        let a: ParamVector = [("w".to_string(), Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap())]
            .into_iter()
            .collect();
        let b = a.zeros_like();
        let err = compare(&a, &b, 1e-4).unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
    }
}
