use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Check at most this many elements per input (sampled without
    /// replacement); `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a relu kink, a pooling tie, or a
    /// loss clamp boundary; finite differences are meaningless there.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|c| c.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|c| c.skipped).sum()
    }
}

/// Check every element of every input with the given `epsilon`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck {
        epsilon,
        ..GradCheck::default()
    }
    .run(inputs, build)
}

impl GradCheck {
    /// Compare analytic gradients of `f = Σ r ⊙ build(inputs)` against central
    /// differences `(f(x+ε) − f(x−ε)) / 2ε`, per input element. `r` is a fixed
    /// random weighting drawn from `seed` (just `1` when `build` returns a
    /// scalar).
    ///
    /// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::param("grad_check epsilon must be positive"));
        }
        let eval = |values: &[Tensor<f64>]| -> Result<(Tensor<f64>, u64)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            Ok((g.value(out).clone(), g.kink_signature()))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let base_sig = g.kink_signature();
        let weights = if g.value(out).len() == 1 {
            Tensor::ones(g.value(out).shape().to_vec())
        } else {
            Tensor::uniform(g.value(out).shape().to_vec(), -1.0, 1.0, &mut rng)
        };
        let w = g.constant(weights.clone());
        let projected = g.mul(out, w)?;
        let loss = g.sum(projected)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let indices: Vec<usize> = match self.max_elements {
                Some(k) if k < input.len() => {
                    let mut v = sample(&mut rng, input.len(), k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..input.len()).collect(),
            };
            let mut check = InputCheck::default();
            for j in indices {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.epsilon;
                let (fp, sp) = eval(&work)?;
                work[i].data_mut()[j] = orig - self.epsilon;
                let (fm, sm) = eval(&work)?;
                work[i].data_mut()[j] = orig;
                if sp != base_sig || sm != base_sig {
                    check.skipped += 1;
                    continue;
                }
                // Difference outputs elementwise before projecting so unaffected
                // elements cancel exactly.
                let numeric = fp
                    .data()
                    .iter()
                    .zip(fm.data())
                    .zip(weights.data())
                    .map(|((&p, &m), &r)| r * (p - m))
                    .sum::<f64>()
                    / (2.0 * self.epsilon);
                let a = analytic[i].data()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                if !rel.is_finite() {
                    return Err(Error::Verification(format!(
                        "non-finite gradient comparison at input {i}, element {j}"
                    )));
                }
                check.max_rel_error = check.max_rel_error.max(rel);
                check.checked += 1;
            }
            report.inputs.push(check);
        }
        Ok(report)
    }
}
