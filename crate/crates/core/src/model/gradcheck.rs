//! Central-finite-difference verification of the manual backward pass.

use rand::Rng;

use crate::error::Result;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::simgr::SimGrConfig;
use crate::tokenizer::SemanticIdTable;

use super::train::{batch_loss, loss_and_grads, Objective, TrainBatch, TrainExample};
use super::ModelParams;

/// Worst relative error overall and per parameter block.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_block: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

// Below this magnitude relative error is dominated by central-difference
// roundoff (~eps/h), so such coordinates are compared absolutely.
const REL_ERR_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < REL_ERR_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares supplied analytic gradients against central differences on
/// up to `samples_per_block` coordinates per parameter block.
pub fn grad_check_against<F: Scalar>(
    params: &ModelParams<F>,
    example: &TrainExample,
    objective: Objective,
    simgr_cfg: &SimGrConfig,
    table: &SemanticIdTable,
    grads: &ModelParams<F>,
    h: f64,
    samples_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let batch = TrainBatch {
        examples: vec![example.clone()],
    };
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_blocks()
        .into_iter()
        .map(|(name, data, _)| (name, data.iter().map(|v| v.to_double()).collect()))
        .collect();

    let mut work = params.clone();
    let step = F::of(h);
    let mut per_block = Vec::with_capacity(analytic.len());
    let mut max_rel: f64 = 0.0;

    for (bi, (name, a_block)) in analytic.iter().enumerate() {
        let len = a_block.len();
        let coords: Vec<usize> = if len <= samples_per_block {
            (0..len).collect()
        } else {
            let mut rng = stream(seed, "gradcheck", bi as u64);
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < samples_per_block {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };

        let mut block_max: f64 = 0.0;
        for &ci in &coords {
            let orig = work.named_blocks_mut()[bi].1[ci];
            work.named_blocks_mut()[bi].1[ci] = orig + step;
            let up = batch_loss(&work, &batch, objective, simgr_cfg, table)?.to_double();
            work.named_blocks_mut()[bi].1[ci] = orig - step;
            let down = batch_loss(&work, &batch, objective, simgr_cfg, table)?.to_double();
            work.named_blocks_mut()[bi].1[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            block_max = block_max.max(rel_err(a_block[ci], numeric));
        }
        max_rel = max_rel.max(block_max);
        per_block.push((name.clone(), block_max));
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_block,
    })
}

/// Computes analytic gradients for one example, then verifies them with
/// central differences.
pub fn grad_check<F: Scalar>(
    params: &ModelParams<F>,
    example: &TrainExample,
    objective: Objective,
    simgr_cfg: &SimGrConfig,
    table: &SemanticIdTable,
    h: f64,
    samples_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let batch = TrainBatch {
        examples: vec![example.clone()],
    };
    let (_, grads, _) = loss_and_grads(params, &batch, objective, simgr_cfg, table, None)?;
    grad_check_against(
        params,
        example,
        objective,
        simgr_cfg,
        table,
        &grads,
        h,
        samples_per_block,
        seed,
    )
}
