//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Bindings, Evaluator, Graph, NumericsError};

/// At most this many elements are probed per parameter; smaller parameters
/// are probed exhaustively.
const MAX_PROBES: usize = 64;

/// Relative errors from one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    /// Worst relative error overall (0 for a parameter-free graph).
    pub worst: f64,
    /// Total number of elements probed.
    pub probes: usize,
    /// Whether `worst` stayed under the requested tolerance.
    pub pass: bool,
}

/// Compare reverse-mode gradients of the named scalar output against central
/// differences, probing every parameter (subsampled above [`MAX_PROBES`]
/// elements). Runs at f64 only; `step` must lie in `[1e-6, 1e-3]`.
///
/// Relative error convention: `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings<f64>,
    output: &str,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport, NumericsError> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(NumericsError::BadStep(step));
    }
    let mut ev = Evaluator::new(graph);
    ev.bind_all(bindings)?;
    ev.forward()?;
    ev.backward(output)?;
    let analytic: BTreeMap<String, Array<f64>> = graph
        .param_names()
        .map(|n| Ok((n.to_string(), ev.param_grad(n)?)))
        .collect::<Result<_, NumericsError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (name, grad) in &analytic {
        let base = bindings
            .get(name)
            .ok_or_else(|| NumericsError::Unbound(name.clone()))?
            .clone();
        let n = base.numel();
        let picks: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            sample(&mut rng, n, MAX_PROBES).into_vec()
        };
        let mut local_worst = 0.0f64;
        for idx in picks {
            let mut probe = base.clone();
            probe.data_mut()[idx] += step;
            ev.bind(name, &probe)?;
            ev.forward()?;
            let up = ev.output_scalar(output)?;
            probe.data_mut()[idx] = base.data()[idx] - step;
            ev.bind(name, &probe)?;
            ev.forward()?;
            let down = ev.output_scalar(output)?;
            let fd = (up - down) / (2.0 * step);
            if !fd.is_finite() {
                return Err(NumericsError::BadEstimate(name.clone()));
            }
            let g = grad.data()[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            local_worst = local_worst.max(rel);
            probes += 1;
        }
        // restore the unperturbed value for the next parameter
        ev.bind(name, &base)?;
        worst = worst.max(local_worst);
        per_param.insert(name.clone(), local_worst);
    }
    Ok(GradReport { per_param, worst, probes, pass: worst < tolerance })
}

// ── tests ───────────────────────────────────────────────────────────────────
