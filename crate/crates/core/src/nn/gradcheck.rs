//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Param;
use crate::error::{Error, Result};

/// A scalar function of named `f64` parameters.
pub trait GradObjective {
    /// Evaluates the function. When `with_grad` is set, parameter gradient
    /// buffers are zeroed and then filled with the analytic gradient.
    fn evaluate(&mut self, with_grad: bool) -> Result<f64>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>));

    /// The function as a sum of terms, without gradients. Differencing term
    /// by term avoids the rounding of the final sum, which otherwise
    /// dominates the finite-difference error of small derivatives.
    fn evaluate_terms(&mut self) -> Result<Vec<f64>> {
        Ok(vec![self.evaluate(false)?])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates re-estimated with a smaller step because the default
    /// step straddled a non-differentiable point.
    pub kink_retries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn nudge(obj: &mut dyn GradObjective, param: usize, coord: usize, delta: f64) {
    let mut idx = 0;
    obj.visit_params_mut(&mut |_, p| {
        if idx == param {
            p.value.data[coord] += delta;
        }
        idx += 1;
    });
}

fn set_coord(obj: &mut dyn GradObjective, param: usize, coord: usize, value: f64) {
    let mut idx = 0;
    obj.visit_params_mut(&mut |_, p| {
        if idx == param {
            p.value.data[coord] = value;
        }
        idx += 1;
    });
}

/// Step reduction applied when a coordinate sits next to a kink.
pub const KINK_STEP_DIVISOR: f64 = 100.0;

/// `sum_k (f_k(p + h) - f_k(p - h)) / 2h` for one coordinate, restoring it
/// afterwards.
fn central_difference(
    obj: &mut dyn GradObjective,
    param: usize,
    coord: usize,
    value: f64,
    h: f64,
    name: &str,
) -> Result<f64> {
    nudge(obj, param, coord, h);
    let plus = obj.evaluate_terms()?;
    set_coord(obj, param, coord, value);
    nudge(obj, param, coord, -h);
    let minus = obj.evaluate_terms()?;
    set_coord(obj, param, coord, value);
    if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient check of {name}[{coord}]")));
    }
    Ok(plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * h))
}

/// Compares analytic gradients against `(f(p + eps) - f(p - eps)) / 2 eps`.
///
/// At most `max_coords` coordinates per parameter are checked, drawn
/// without replacement from a generator seeded with `seed`.
pub fn grad_check(
    obj: &mut dyn GradObjective,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let base = obj.evaluate(true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient check base evaluation".into()));
    }
    let mut snapshot: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    obj.visit_params_mut(&mut |name, p| snapshot.push((name, p.value.data.clone(), p.grad.clone())));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(snapshot.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, values, analytic)) in snapshot.iter().enumerate() {
        let coords: Vec<usize> = if values.len() <= max_coords {
            (0..values.len()).collect()
        } else {
            let mut c = sample(&mut rng, values.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        let mut worst_pair = (0.0, 0.0);
        let mut kink_retries = 0;
        for &ci in &coords {
            let mut numeric = central_difference(obj, pi, ci, values[ci], eps, name)?;
            let mut err = relative_error(analytic[ci], numeric);
            if err > tol {
                // Disagreeing estimates at two step sizes mean the function is
                // not smooth within the step (a ReLU kink); only then is the
                // derivative re-estimated with a much smaller step.
                let half = central_difference(obj, pi, ci, values[ci], eps / 2.0, name)?;
                if relative_error(numeric, half) > tol {
                    kink_retries += 1;
                    numeric = central_difference(obj, pi, ci, values[ci], eps / KINK_STEP_DIVISOR, name)?;
                    err = relative_error(analytic[ci], numeric);
                }
            }
            if err >= worst {
                worst = err;
                worst_pair = (analytic[ci], numeric);
            }
        }
        overall = overall.max(worst);
        params.push(ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: worst,
            worst_analytic: worst_pair.0,
            worst_numeric: worst_pair.1,
            kink_retries,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_err: overall,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    /// f(p) = sum_i c_i p_i + d
    struct Affine {
        p: Param<f64>,
        c: Vec<f64>,
    }

    impl GradObjective for Affine {
        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            if with_grad {
                self.p.grad.copy_from_slice(&self.c);
            }
            Ok(self.p.value.data.iter().zip(&self.c).map(|(p, c)| p * c).sum::<f64>() + 0.25)
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
            f("p".into(), &mut self.p);
        }
    }

    #[test]
    fn affine_is_exact() {
        let mut obj = Affine {
            p: Param::new(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0])),
            c: vec![1.0, -0.5, 3.0, 0.125],
        };
        let report = grad_check(&mut obj, 1e-3, 1e-10, 10, 0).unwrap();
        assert!(report.max_rel_err <= 1e-10, "{report:?}");
        assert_eq!(report.params[0].checked, 4);
        // parameters restored
        assert_eq!(obj.p.value.data, vec![0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    struct Relu {
        x: Param<f64>,
        wrong: bool,
    }

    impl GradObjective for Relu {
        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            let x = self.x.value.data[0];
            if with_grad {
                let d = if x > 0.0 { 1.0 } else { 0.0 };
                self.x.grad = vec![if self.wrong { 2.0 * d } else { d }];
            }
            Ok(x.max(0.0) + 0.1 * x * x * x)
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
            f("x".into(), &mut self.x);
        }
    }

    #[test]
    fn step_straddling_a_kink_is_retried() {
        let mut obj = Relu {
            x: Param::new(Tensor::from_vec(&[1], vec![1e-6])),
            wrong: false,
        };
        let r = grad_check(&mut obj, 5e-6, 1e-4, 1, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.params[0].kink_retries, 1);
    }

    #[test]
    fn smooth_mismatch_is_not_retried() {
        let mut obj = Relu {
            x: Param::new(Tensor::from_vec(&[1], vec![0.5])),
            wrong: true,
        };
        let r = grad_check(&mut obj, 5e-6, 1e-4, 1, 0).unwrap();
        assert!(!r.passed());
        assert_eq!(r.params[0].kink_retries, 0);
    }
}
