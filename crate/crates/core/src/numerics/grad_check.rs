//! Finite-difference verification of analytic gradients.

use super::{BoundParams, Graph, ParamSet, Rng, Var};
use crate::error::Result;

/// A scalar function of a [`ParamSet`] with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// An [`Objective`] defined by a graph-building closure returning a
/// one-element loss.
pub struct GraphObjective<F>(pub F);

impl<F> Objective for GraphObjective<F>
where
    F: Fn(&Graph, &BoundParams) -> Result<Var>,
{
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let g = Graph::inference();
        let bound = params.bind(&g);
        Ok((self.0)(&g, &bound)?.item())
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let g = Graph::new();
        let bound = params.bind(&g);
        let loss = (self.0)(&g, &bound)?;
        let grads = g.backward(&loss)?;
        Ok((loss.item(), bound.gradients(&grads)))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Initial central-difference step.
    pub step: f64,
    /// How many times the step may shrink (by 8) while looking for a
    /// neighbourhood without kinks.
    pub max_shrinks: usize,
    /// Check at most this many entries per tensor, chosen at random.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_shrinks: 4,
            per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - n| / (|a| + |n| + 1e-8)` seen.
    pub worst_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
    /// Entries whose difference quotients never settled, i.e. sat on a kink
    /// at every step tried.
    pub unsettled: usize,
    /// Entries where analytic and numeric values differ by less than the
    /// rounding noise of the difference quotient; these count as agreeing.
    pub within_roundoff: usize,
    /// Largest relative error before the rounding-noise allowance.
    pub worst_raw_relative_error: f64,
    /// Entries whose rounding noise is below 1e-3 of `|a| + |n|`, i.e. where
    /// the difference quotient resolves at least three digits.
    pub resolved: usize,
    /// Largest raw relative error over the resolved entries.
    pub worst_resolved_relative_error: f64,
}

/// Rounding error of a loss evaluation, in units of `ε·|f|`, assumed when
/// bounding the noise of a difference quotient.
const ROUNDOFF_FACTOR: f64 = 64.0;

/// Relative disagreement between the quotients at `h` and `h/2` beyond which
/// the step is shrunk.
const AGREEMENT: f64 = 1e-6;

/// Noise-to-magnitude ratio below which an entry counts as resolved.
const RESOLVED: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

struct Derivative {
    value: f64,
    noise: f64,
    settled: bool,
}

/// Central-difference derivative of `f` at 0, shrinking the step until two
/// successive quotients agree.
fn numeric_derivative(
    mut f: impl FnMut(f64) -> Result<f64>,
    options: &GradCheckOptions,
) -> Result<Derivative> {
    let mut quotient = |h: f64| -> Result<(f64, f64)> {
        let up = f(h)?;
        let down = f(-h)?;
        let noise = ROUNDOFF_FACTOR * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * h);
        Ok(((up - down) / (2.0 * h), noise))
    };
    let mut h = options.step;
    let mut last = (0.0, 0.0);
    for _ in 0..=options.max_shrinks {
        let (coarse, _) = quotient(h)?;
        let (fine, noise) = quotient(h / 2.0)?;
        last = (fine, noise);
        // A kink between the probes shows up as disagreement well above
        // the truncation and rounding error of a smooth function.
        if (coarse - fine).abs() <= AGREEMENT * (coarse.abs() + fine.abs()) + 2.0 * noise {
            // Richardson extrapolation cancels the h² term.
            return Ok(Derivative {
                value: (4.0 * fine - coarse) / 3.0,
                noise,
                settled: true,
            });
        }
        h /= 8.0;
    }
    Ok(Derivative {
        value: last.0,
        noise: last.1,
        settled: false,
    })
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            worst_relative_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            entries_checked: 0,
            unsettled: 0,
            within_roundoff: 0,
            worst_raw_relative_error: 0.0,
            resolved: 0,
            worst_resolved_relative_error: 0.0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, d: &Derivative) {
        if !d.settled {
            self.unsettled += 1;
        }
        let mut err = relative_error(analytic, d.value);
        self.worst_raw_relative_error = self.worst_raw_relative_error.max(err);
        if d.noise <= RESOLVED * (analytic.abs() + d.value.abs()) {
            self.resolved += 1;
            self.worst_resolved_relative_error = self.worst_resolved_relative_error.max(err);
        }
        if err > 0.0 && (analytic - d.value).abs() <= d.noise {
            self.within_roundoff += 1;
            err = 0.0;
        }
        self.entries_checked += 1;
        if err > self.worst_relative_error || self.worst_param.is_empty() {
            self.worst_relative_error = err;
            self.worst_param = name.to_string();
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = d.value;
        }
    }
}

/// Compares the analytic gradient of `objective` at `params` against central
/// differences, entry by entry.
pub fn check_gradients(
    objective: &dyn Objective,
    params: &ParamSet,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.value_and_grad(params)?;
    let mut rng = Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let mut indices: Vec<usize> = (0..tensor.len()).collect();
        if let Some(n) = options.per_tensor {
            rng.shuffle(&mut indices);
            indices.truncate(n);
            indices.sort_unstable();
        }
        for i in indices {
            let original = tensor.data()[i];
            let d = numeric_derivative(
                |h| {
                    probe.get_mut(name)?.data_mut()[i] = original + h;
                    let v = objective.value(&probe);
                    probe.get_mut(name)?.data_mut()[i] = original;
                    v
                },
                options,
            )?;
            report.record(name, i, analytic.get(name)?.data()[i], &d);
        }
    }
    Ok(report)
}

/// Checks one directional derivative per tensor: for a random unit direction
/// `u` over that tensor's entries, `⟨∇f, u⟩` against a central difference
/// along `u`. A wrong gradient entry anywhere in the tensor shows up with
/// probability one. `worst_index` is the tensor's position in name order.
pub fn check_directional(
    objective: &dyn Objective,
    params: &ParamSet,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.value_and_grad(params)?;
    let mut rng = Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    for (ti, (name, tensor)) in params.iter().enumerate() {
        let mut u = rng.normal_tensor(tensor.shape(), 1.0);
        let norm = u.norm();
        u.data_mut().iter_mut().for_each(|x| *x /= norm);
        let slope: f64 = analytic
            .get(name)?
            .data()
            .iter()
            .zip(u.data())
            .map(|(g, d)| g * d)
            .sum();
        let d = numeric_derivative(
            |h| {
                let t = probe.get_mut(name)?;
                for ((x, x0), d) in t.data_mut().iter_mut().zip(tensor.data()).zip(u.data()) {
                    *x = x0 + h * d;
                }
                let v = objective.value(&probe);
                probe.get_mut(name)?.data_mut().copy_from_slice(tensor.data());
                v
            },
            options,
        )?;
        report.record(name, ti, slope, &d);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    /// `Σ x³` with an optional error planted in one gradient entry.
    struct Cubic {
        planted: Option<(usize, f64)>,
    }

    impl Objective for Cubic {
        fn value(&self, p: &ParamSet) -> Result<f64> {
            Ok(p.get("x")?.data().iter().map(|x| x * x * x).sum())
        }

        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, ParamSet)> {
            let mut g = p.get("x")?.map(|x| 3.0 * x * x);
            if let Some((i, delta)) = self.planted {
                g.data_mut()[i] += delta;
            }
            let mut grads = ParamSet::new();
            grads.insert("x", g);
            Ok((self.value(p)?, grads))
        }
    }

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_fn(&[50], |i| (i as f64 * 0.37).sin()));
        p
    }

    #[test]
    fn correct_gradient_passes_both_checks() {
        let obj = Cubic { planted: None };
        let opts = GradCheckOptions::default();
        let r = check_gradients(&obj, &params(), &opts).unwrap();
        assert_eq!(r.entries_checked, 50);
        assert!(r.worst_relative_error < 1e-8, "{r:?}");
        assert!(r.resolved > 40 && r.worst_resolved_relative_error < 1e-6, "{r:?}");
        let r = check_directional(&obj, &params(), &opts).unwrap();
        assert_eq!(r.entries_checked, 1);
        assert!(r.worst_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn planted_error_is_found() {
        let obj = Cubic {
            planted: Some((17, 0.5)),
        };
        let opts = GradCheckOptions::default();
        let r = check_gradients(&obj, &params(), &opts).unwrap();
        assert_eq!(r.worst_index, 17);
        assert!(r.worst_relative_error > 1e-2);
        assert!(r.worst_resolved_relative_error > 1e-2);
        for seed in 0..5 {
            let opts = GradCheckOptions { seed, ..opts.clone() };
            let r = check_directional(&obj, &params(), &opts).unwrap();
            assert!(r.worst_relative_error > 1e-4, "{r:?}");
        }
    }

    #[test]
    fn sampling_limits_entries() {
        let obj = Cubic { planted: None };
        let opts = GradCheckOptions {
            per_tensor: Some(7),
            ..Default::default()
        };
        let r = check_gradients(&obj, &params(), &opts).unwrap();
        assert_eq!(r.entries_checked, 7);
    }

    #[test]
    fn kink_is_stepped_off() {
        struct Abs;
        impl Objective for Abs {
            fn value(&self, p: &ParamSet) -> Result<f64> {
                Ok(p.get("x")?.data().iter().map(|x| (x - 0.3).abs()).sum())
            }
            fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, ParamSet)> {
                let mut grads = ParamSet::new();
                grads.insert("x", p.get("x")?.map(|x| (x - 0.3).signum()));
                Ok((self.value(p)?, grads))
            }
        }
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(&[2], vec![0.30002, -1.0]).unwrap());
        let r = check_gradients(&Abs, &p, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.unsettled, 0);
        assert!(r.worst_relative_error < 1e-8, "{r:?}");
    }
}
