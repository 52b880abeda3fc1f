use super::{NnError, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Hash of every ReLU's on/off pattern during the forward pass.
    pub kinks: u64,
}

/// A model instance with fixed inputs and a scalar loss, in `f64`.
pub trait Differentiable {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>>;
    /// Forward pass only.
    fn evaluate(&mut self) -> Result<Evaluation, NnError>;
    /// Forward and backward pass, accumulating into parameter gradients.
    fn backprop(&mut self) -> Result<Evaluation, NnError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose step had to shrink because `eps` crossed a ReLU kink.
    pub refined: usize,
}

const KINK_RETRIES: u32 = 4;

/// Compare every analytic gradient entry with a central finite difference.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-8)`. When a perturbation
/// flips any ReLU the difference straddles a kink, so the step is shrunk by
/// 10x (up to four times) until the activation pattern is unchanged.
pub fn grad_check<M: Differentiable>(model: &mut M, eps: f64) -> Result<GradCheckReport, NnError> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(NnError::Invalid(format!("eps must be in [1e-5, 1e-2], got {eps}")));
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    let base = model.backprop()?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    for (name, g) in &analytic {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(name.clone()));
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        refined: 0,
    };
    for (pi, (_, grads)) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[pi].values[j];
            let mut step = eps;
            let mut numeric = 0.0;
            for attempt in 0..=KINK_RETRIES {
                model.params_mut()[pi].values[j] = orig + step;
                let plus = model.evaluate()?;
                model.params_mut()[pi].values[j] = orig - step;
                let minus = model.evaluate()?;
                numeric = (plus.loss - minus.loss) / (2.0 * step);
                if plus.kinks == base.kinks && minus.kinks == base.kinks {
                    break;
                }
                if attempt < KINK_RETRIES {
                    step /= 10.0;
                    if attempt == 0 {
                        report.refined += 1;
                    }
                }
            }
            model.params_mut()[pi].values[j] = orig;
            if !numeric.is_finite() {
                return Err(NnError::NonFinite(analytic[pi].0.clone()));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(report)
}
