//! Full-objective gradient verification: compares the tape's backward pass
//! against central finite differences over every learnable parameter of a
//! miniature model (denoiser, embedding tables, both schedules).

use serde::Serialize;

use crate::autodiff::{grad_check, NodeId, Tape};
use crate::dataio::gen_toy;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::DiffusionModel;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::training::{build_loss, prepare_batch, ModelLeaves};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Outcome of one verification run.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, eps) over all
    /// probed elements.
    pub max_rel_err: f64,
    pub parameter_arrays: usize,
    pub elements: usize,
    pub threshold: f64,
    pub precision: &'static str,
    pub passed: bool,
}

fn mini_config() -> DenoiserConfig {
    DenoiserConfig {
        num_features: 3,
        cat_cardinalities: vec![3, 2],
        label_cardinality: 2,
        embed_dim: 4,
        hidden: 8,
        layers: 2,
        time_dim: 8,
        label_dim: 4,
    }
}

fn check<T: Scalar>(h: T, threshold: f64, precision: &'static str) -> Result<GradCheckReport> {
    let seq_len = 4;
    let batch = 2;
    let config = mini_config();
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let model = DiffusionModel::<T>::init(config.clone(), seq_len, &mut rng)?;
    let (_, data) = gen_toy(batch, seq_len, 23);
    let indices: Vec<usize> = (0..batch).collect();
    let prepared = prepare_batch::<T, _>(
        &data.numerical,
        &data.categorical,
        &data.labels,
        &indices,
        &config,
        0.5,
        &mut rng,
    )?;

    let point: Vec<Array2<T>> = model
        .named_params()
        .iter()
        .map(|(_, a)| (*a).clone())
        .collect();
    let elements: usize = point.iter().map(|a| a.len()).sum();
    let build = |tape: &mut Tape<T>, ids: &[NodeId]| {
        let leaves = ModelLeaves::from_flat(ids, &model);
        build_loss(
            tape,
            &model,
            &leaves,
            &prepared,
            T::one(),
            T::one(),
            true,
        )
        .expect("loss assembles")
        .total
    };
    let max_rel_err = grad_check(&build, &point, h).to_f64();
    Ok(GradCheckReport {
        max_rel_err,
        parameter_arrays: point.len(),
        elements,
        threshold,
        precision,
        passed: max_rel_err < threshold,
    })
}

/// Run the verification. `double` uses f64 end to end with a 1e-4 pass
/// threshold; the default f32 run uses a looser threshold matching single
/// precision's finite-difference noise floor.
pub fn run(double: bool) -> Result<GradCheckReport> {
    if double {
        check::<f64>(1e-5, 1e-4, "f64")
    } else {
        check::<f32>(1e-2, 5e-2, "f32")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences_in_f64() {
        let report = run(true).unwrap();
        assert!(
            report.passed,
            "max relative error {} over {} elements",
            report.max_rel_err, report.elements
        );
        assert!(report.max_rel_err < 1e-4);
        assert!(report.parameter_arrays > 20);
    }

    #[test]
    fn single_precision_run_stays_under_its_threshold() {
        let report = run(false).unwrap();
        assert!(
            report.passed,
            "max relative error {} over {} elements",
            report.max_rel_err, report.elements
        );
    }
}
