//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per input (all of them when the input is smaller).
    pub samples_per_input: usize,
    /// Coordinates where both gradients are smaller than this are not
    /// compared: at `eps = 1e-4` rounding alone costs about `1e-12` absolute.
    pub min_magnitude: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            samples_per_input: 32,
            min_magnitude: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation straddled a non-differentiable point at
    /// every step size tried.
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compares the gradient from [`Graph::backward`] with central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// `builder` receives a fresh kink-tracking graph and one leaf per named
/// input, and returns the scalar loss. When a perturbation changes the
/// graph's kink signature, the step is shrunk tenfold (up to three times)
/// before the coordinate is skipped.
pub fn gradcheck<F>(
    inputs: &[(&str, Tensor)],
    builder: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64), TensorError> {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = builder(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.kink_signature()))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (analytic, base_sig) = {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = builder(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(&values)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (analytic, g.kink_signature())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut passed = true;
    for (slot, (name, _)) in inputs.iter().enumerate() {
        let n = values[slot].numel();
        let coords: Vec<usize> = if n <= opts.samples_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_input).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = InputReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        for &c in &coords {
            let orig = values[slot].data()[c];
            let mut eps = opts.eps;
            let mut fd = None;
            for _ in 0..4 {
                values[slot].data_mut()[c] = orig + eps;
                let (fp, sp) = eval(&values)?;
                values[slot].data_mut()[c] = orig - eps;
                let (fm, sm) = eval(&values)?;
                if sp == base_sig && sm == base_sig {
                    fd = Some((fp - fm) / (2.0 * eps));
                    break;
                }
                eps /= 10.0;
            }
            values[slot].data_mut()[c] = orig;
            let Some(fd) = fd else {
                report.skipped_kinks += 1;
                continue;
            };
            let an = analytic[slot].data()[c];
            let scale = fd.abs().max(an.abs());
            if scale <= opts.min_magnitude {
                continue;
            }
            let rel = (an - fd).abs() / scale;
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        if !(report.max_rel_err <= opts.tol) {
            passed = false;
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        inputs: reports,
        passed,
    })
}
