//! Finite-difference check of the full fusion loss gradient.
//!
//! The forward pass runs in train mode without stochastic streams (no
//! dropout, no routing noise) so it is a smooth deterministic function of
//! the parameters; importance-loss gates are frozen at the base point so
//! central differences see the same branch the analytic pass took.

use crate::data::{generate, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModel, Mode, MopeSettings};
use crate::params::Binder;
use crate::router::importance_loss;
use crate::tensor::{grad_check, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub imp_weight: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            batch: 4,
            step: 1e-5,
            tolerance: 1e-4,
            imp_weight: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub params_checked: usize,
    pub scalars_checked: usize,
    pub batch: usize,
    /// per-layer importance gates at the base point (false = gated)
    pub gates: Vec<bool>,
    /// gated layers contribute exactly zero gradient through the
    /// importance loss (checked on the router weights of a gated layer)
    pub gated_layers_zero: bool,
}

fn check_model() -> FusionConfig {
    FusionConfig {
        main: EncoderConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            seq_len: 8,
            vocab: Some(16),
        },
        complementary: EncoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            seq_len: 2,
            vocab: None,
        },
        mope: MopeSettings {
            experts: 4,
            prompt_len: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn check_data(seed: u64, n: usize) -> Result<Vec<crate::data::SyntheticInstance>> {
    let ds = generate(&SyntheticConfig {
        num_clusters: 4,
        seq_len: 8,
        d_y: 8,
        train_size: n.max(1),
        val_size: 1,
        test_size: 1,
        seed,
        ..Default::default()
    })?;
    Ok(ds.train)
}

/// Check every trainable parameter of a small but fully featured fusion
/// model against central differences of the combined loss.
pub fn full_fusion_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, check_model())
}

#[doc(hidden)]
pub fn debug_grad_check(
    cfg: &GradCheckConfig,
    flags: crate::fusion::PromptFlags,
) -> Result<GradCheckReport> {
    let mut fc = check_model();
    fc.prompts = flags;
    grad_check_with(cfg, fc)
}

fn grad_check_with(cfg: &GradCheckConfig, fusion_cfg: FusionConfig) -> Result<GradCheckReport> {
    let data = check_data(cfg.seed, cfg.batch)?;
    let batch_owned: Vec<_> = data.into_iter().take(cfg.batch).collect();
    let labels: Vec<usize> = batch_owned.iter().map(|i| i.label).collect();
    let mut model = FusionModel::new(&fusion_cfg, 8, cfg.seed)?;
    let gamma = model.cfg.mope.gamma;
    let ids: Vec<usize> = model.store.iter().map(|(id, _)| id).collect();

    // base pass: freeze gates, collect analytic gradients
    let (gates, base_cv2, analytic, base_values) = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let batch: Vec<&_> = batch_owned.iter().collect();
        let out = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Train, None)?;
        let ce = tape.cross_entropy_mean(out.logits, &labels)?;
        let (total, gates, base_cv2) = if out.record.entries.is_empty() {
            (ce, Vec::new(), Vec::new())
        } else {
            let imp = importance_loss(&mut tape, &out.record, gamma, None)?;
            let scaled = tape.scale(imp.var, cfg.imp_weight)?;
            (tape.add(ce, scaled)?, imp.gates, imp.per_layer_cv2)
        };
        let grads = tape.backward(total)?;
        let analytic: Vec<Option<Tensor>> = ids
            .iter()
            .map(|&id| {
                binder
                    .bound_var(id)
                    .ok()
                    .and_then(|v| grads.get(v).cloned())
            })
            .collect();
        let base_values: Vec<Tensor> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
        (gates, base_cv2, analytic, base_values)
    };

    // gated-layer exactness: the importance term alone must send exactly
    // zero gradient into a gated layer's router weights
    let gated_layers_zero = {
        let mut ok = true;
        if let Some(gl) = gates.iter().position(|g| !g) {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.store);
            let batch: Vec<&_> = batch_owned.iter().collect();
            let out = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Train, None)?;
            let imp = importance_loss(&mut tape, &out.record, gamma, Some(&gates))?;
            let grads = tape.backward(imp.var)?;
            for (id, p) in model.store.iter() {
                if p.name.contains(&format!("router.layer{gl}")) {
                    if let Ok(v) = binder.bound_var(id) {
                        if let Some(g) = grads.get(v) {
                            ok &= g.data().iter().all(|&x| x == 0.0);
                        }
                    }
                }
            }
        }
        ok
    };

    let mut f = |vals: &[Tensor]| -> Result<f64> {
        for (i, &id) in ids.iter().enumerate() {
            model.store.set_value(id, vals[i].clone());
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let batch: Vec<&_> = batch_owned.iter().collect();
        let out = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Train, None)?;
        let ce = tape.cross_entropy_mean(out.logits, &labels)?;
        if out.record.entries.is_empty() {
            return Ok(tape.value(ce).item());
        }
        // stop-gradient semantics: gated layers are constants as far as
        // the gradient is concerned, so hold them at their base values
        // when probing with finite differences
        let imp = importance_loss(&mut tape, &out.record, gamma, Some(&gates))?;
        let mut s = 0.0;
        for (l, &live) in gates.iter().enumerate() {
            s += if live { imp.per_layer_cv2[l] } else { base_cv2[l] };
        }
        Ok(tape.value(ce).item() + cfg.imp_weight * s / gates.len() as f64)
    };
    let max_rel_err = grad_check(&mut f, &base_values, &analytic, cfg.step)?;
    let scalars_checked = base_values.iter().map(|t| t.len()).sum();
    Ok(GradCheckReport {
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err <= cfg.tolerance && gated_layers_zero,
        params_checked: ids.len(),
        scalars_checked,
        batch: cfg.batch,
        gates,
        gated_layers_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fusion_gradient_matches_finite_differences() {
        let rep = full_fusion_grad_check(&GradCheckConfig::default()).unwrap();
        assert!(
            rep.max_rel_err <= 1e-4,
            "max rel err = {}",
            rep.max_rel_err
        );
        assert!(rep.gated_layers_zero);
        assert!(rep.passed);
    }
}
