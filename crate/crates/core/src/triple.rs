//! Construction of the base / visual / reasoning checkpoint triple.
//!
//! `make_triple` builds three related models:
//!
//! 1. θ_base: random init (seed `base`), then `epochs.base` plain-GD steps
//!    on the blended generic task.
//! 2. θ_vlm: θ_base fine-tuned `epochs.finetune` steps on TaskV. This is the
//!    only phase that updates the frozen `adapter` layer (the input tower is
//!    "trained with the vision data").
//! 3. θ_lrm: θ_base fine-tuned `epochs.finetune` steps on TaskR with frozen
//!    layers held fixed, so θ_lrm's adapter stays bitwise equal to θ_base's.
//!
//! Training is plain gradient descent on mean cross-entropy with a fixed
//! step size of 0.05 and batch size 64; each step draws a fresh batch from
//! the task's seeded stream.
//!
//! Returned checkpoints are snapped to the grid of multiples of 2⁻²⁰
//! (≈ 1e-6, far below any accuracy-relevant scale). On-grid f32 weights make
//! task-vector arithmetic exact: fl(v − b) and fl(b + τ) round-trip
//! bit-for-bit, which the merge identities rely on.

use crate::error::{Error, Result};
use crate::model::{cross_entropy, cross_entropy_grad, ModelParams, Provenance};
use crate::task::{SyntheticTask, TaskKind};
use serde::{Deserialize, Serialize};

/// Fixed GD step size for triple construction.
pub const GD_STEP: f64 = 0.05;

/// Fixed GD batch size for triple construction.
pub const GD_BATCH: usize = 64;

/// Weight grid: checkpoints hold multiples of 2⁻²⁰.
pub const WEIGHT_GRID: f64 = 9.5367431640625e-7; // 2^-20

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleSeeds {
    pub base: u64,
    pub vlm: u64,
    pub lrm: u64,
}

impl Default for TripleSeeds {
    fn default() -> Self {
        TripleSeeds {
            base: 11,
            vlm: 22,
            lrm: 33,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    /// GD steps of generic pre-training for θ_base.
    pub base: usize,
    /// GD steps of task fine-tuning for θ_vlm and θ_lrm.
    pub finetune: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Epochs {
            base: 150,
            finetune: 3000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Triple {
    pub base: ModelParams,
    pub vlm: ModelParams,
    pub lrm: ModelParams,
}

/// Snaps every weight to the 2⁻²⁰ grid and canonicalizes -0.0 to +0.0.
pub fn quantize_to_grid(params: &mut ModelParams) {
    for t in params.tensors.values_mut() {
        for v in t.data_mut() {
            let snapped = ((*v as f64) / WEIGHT_GRID).round() * WEIGHT_GRID;
            *v = if snapped == 0.0 { 0.0 } else { snapped as f32 };
        }
    }
}

/// `steps` plain-GD steps on `task`. `train_frozen` lifts the architecture's
/// frozen-layer set for the duration (used by the θ_vlm phase only).
pub fn gd_finetune(
    start: &ModelParams,
    task: &SyntheticTask,
    steps: usize,
    train_frozen: bool,
) -> Result<ModelParams> {
    let mut params = start.clone();
    for step in 0..steps {
        let batch = task.stream_batch(step as u64, GD_BATCH)?;
        let labels = batch.labels.as_ref().expect("stream_batch labels");
        let (_, trace) = params.forward_trace(&batch.inputs)?;
        let loss = cross_entropy(trace.probs(), labels)?;
        if !loss.is_finite() {
            return Err(Error::Domain(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        let grads = params.backward(&trace, &cross_entropy_grad(trace.probs(), labels)?)?;
        for (name, tensor) in params.tensors.iter_mut() {
            if !train_frozen && start.arch.is_frozen(name) {
                continue;
            }
            let g = &grads[name];
            for (w, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                *w = ((*w as f64) - GD_STEP * (*gv as f64)) as f32;
            }
        }
    }
    Ok(params)
}

/// Builds the (θ_base, θ_vlm, θ_lrm) triple. Deterministic in
/// (arch, seeds, epochs); with `epochs = (0, 0)` all three checkpoints are
/// bitwise identical.
pub fn make_triple(
    arch: &crate::model::ArchSpec,
    seeds: TripleSeeds,
    epochs: Epochs,
) -> Result<Triple> {
    arch.validate()?;
    let init = ModelParams::init(arch, seeds.base)?;

    let generic = SyntheticTask::new(TaskKind::Generic, seeds.base);
    let mut base = gd_finetune(&init, &generic, epochs.base, false)?;
    base.provenance = Provenance::Base;
    quantize_to_grid(&mut base);

    let task_v = SyntheticTask::new(TaskKind::TaskV, seeds.vlm);
    let mut vlm = gd_finetune(&base, &task_v, epochs.finetune, true)?;
    vlm.provenance = Provenance::Vlm;
    quantize_to_grid(&mut vlm);

    let task_r = SyntheticTask::new(TaskKind::TaskR, seeds.lrm);
    let mut lrm = gd_finetune(&base, &task_r, epochs.finetune, false)?;
    lrm.provenance = Provenance::Lrm;
    quantize_to_grid(&mut lrm);

    Ok(Triple { base, vlm, lrm })
}

/// True when every tensor of `a` and `b` is bitwise identical.
pub fn params_bitwise_eq(a: &ModelParams, b: &ModelParams) -> bool {
    a.arch == b.arch
        && a.tensors.len() == b.tensors.len()
        && a.tensors
            .iter()
            .zip(&b.tensors)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use crate::task::accuracy;

    fn tiny_epochs() -> Epochs {
        Epochs {
            base: 40,
            finetune: 60,
        }
    }

    #[test]
    fn zero_epochs_yield_identical_checkpoints() {
        let arch = ArchSpec::default();
        let t = make_triple(&arch, TripleSeeds::default(), Epochs { base: 0, finetune: 0 }).unwrap();
        assert!(params_bitwise_eq(&t.base, &t.vlm));
        assert!(params_bitwise_eq(&t.base, &t.lrm));
        assert_eq!(t.vlm.provenance, Provenance::Vlm);
    }

    #[test]
    fn make_triple_is_deterministic() {
        let arch = ArchSpec::default();
        let a = make_triple(&arch, TripleSeeds::default(), tiny_epochs()).unwrap();
        let b = make_triple(&arch, TripleSeeds::default(), tiny_epochs()).unwrap();
        assert!(params_bitwise_eq(&a.base, &b.base));
        assert!(params_bitwise_eq(&a.vlm, &b.vlm));
        assert!(params_bitwise_eq(&a.lrm, &b.lrm));
    }

    #[test]
    fn reasoning_checkpoint_keeps_frozen_adapter() {
        let arch = ArchSpec::default();
        let t = make_triple(&arch, TripleSeeds::default(), tiny_epochs()).unwrap();
        assert!(t.lrm.tensors["adapter.w"].bitwise_eq(&t.base.tensors["adapter.w"]));
        assert!(t.lrm.tensors["adapter.b"].bitwise_eq(&t.base.tensors["adapter.b"]));
        // θ_vlm's adapter did train.
        assert!(!t.vlm.tensors["adapter.w"].bitwise_eq(&t.base.tensors["adapter.w"]));
        // Non-frozen layers moved in both fine-tunes.
        assert!(!t.lrm.tensors["layer0.w"].bitwise_eq(&t.base.tensors["layer0.w"]));
    }

    #[test]
    fn checkpoints_sit_on_the_weight_grid() {
        let arch = ArchSpec::default();
        let t = make_triple(&arch, TripleSeeds::default(), tiny_epochs()).unwrap();
        for params in [&t.base, &t.vlm, &t.lrm] {
            for (name, tensor) in &params.tensors {
                for &v in tensor.data() {
                    let k = (v as f64) / WEIGHT_GRID;
                    assert!(
                        (k - k.round()).abs() < 1e-9,
                        "{name} has off-grid value {v}"
                    );
                    assert!(!(v == 0.0 && v.is_sign_negative()), "{name} holds -0.0");
                }
            }
        }
    }

    #[test]
    fn grid_arithmetic_round_trips_exactly() {
        // The property the merge identities depend on: for on-grid f32 values
        // b, v with |·| < 8, fl(b + fl(v − b)) == v bit-for-bit.
        let arch = ArchSpec::default();
        let t = make_triple(&arch, TripleSeeds::default(), tiny_epochs()).unwrap();
        for name in arch.tensor_names() {
            let b = t.base.tensors[&name].data();
            let v = t.vlm.tensors[&name].data();
            for (&bb, &vv) in b.iter().zip(v) {
                let tau = vv - bb;
                let back = bb + tau;
                assert_eq!(back.to_bits(), vv.to_bits(), "{name}: {bb} + ({vv} - {bb})");
            }
        }
    }

    #[test]
    fn finetuning_specializes_each_model() {
        let arch = ArchSpec::default();
        let t = make_triple(&arch, TripleSeeds::default(), Epochs::default()).unwrap();
        let task_v = SyntheticTask::new(TaskKind::TaskV, 1001).stream_batch(0, 512).unwrap();
        let task_r = SyntheticTask::new(TaskKind::TaskR, 1002).stream_batch(0, 512).unwrap();

        let base_v = accuracy(&t.base, &task_v).unwrap();
        let base_r = accuracy(&t.base, &task_r).unwrap();
        let vlm_v = accuracy(&t.vlm, &task_v).unwrap();
        let lrm_r = accuracy(&t.lrm, &task_r).unwrap();

        assert!(vlm_v >= 0.9, "θ_vlm TaskV accuracy {vlm_v}");
        assert!(lrm_r >= 0.9, "θ_lrm TaskR accuracy {lrm_r}");
        assert!(vlm_v >= base_v + 0.2, "TaskV gain too small: {vlm_v} vs base {base_v}");
        assert!(lrm_r >= base_r + 0.2, "TaskR gain too small: {lrm_r} vs base {base_r}");
    }
}
