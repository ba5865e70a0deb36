//! Per-example evaluation helpers shared by the trainer and the CLI.

use crate::corpus::MixtureExample;
use crate::error::Result;
use crate::pipeline::{MultiStageModel, StageOptions};
use crate::signal::{improvement, Improvement};

/// Runs the pipeline on one example and reports SDR/SI-SDR improvement of
/// every stage's fused output over the unprocessed mixture.
pub fn evaluate_example(
    model: &MultiStageModel,
    example: &MixtureExample,
    opts: StageOptions,
) -> Result<Vec<Improvement>> {
    let out = model.forward_pipeline(&example.mixture, &example.reference, opts)?;
    out.stages
        .iter()
        .map(|st| improvement(&st.fused, &example.mixture, &example.target))
        .collect()
}

/// Mean final-stage SI-SDR improvement over a set of examples; the
/// validation metric of the trainer.
pub fn mean_final_si_sdri(
    model: &MultiStageModel,
    examples: &[MixtureExample],
    opts: StageOptions,
) -> Result<f64> {
    use rayon::prelude::*;
    let values: Result<Vec<f64>> = examples
        .par_iter()
        .map(|ex| Ok(evaluate_example(model, ex, opts)?.last().expect(">=1 stage").si_sdri))
        .collect();
    let values = values?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}
