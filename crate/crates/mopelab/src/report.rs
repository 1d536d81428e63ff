//! Routing analysis over a data split: per-layer expert importance,
//! utilization balance, and per-expert top instances with their latent
//! cluster ids — a desk-scale stand-in for concept-level visualization.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, Mode};
use crate::params::Binder;
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertTopInstance {
    pub instance: usize,
    pub score: f64,
    pub cluster: usize,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertReport {
    pub expert: usize,
    /// routing score summed over the split
    pub importance: f64,
    /// importance / Σ importance (sums to 1 over experts)
    pub importance_share: f64,
    pub top_instances: Vec<ExpertTopInstance>,
    /// majority cluster among the top instances and its share
    pub majority_cluster: usize,
    pub purity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// squared coefficient of variation of importance
    pub cv2: f64,
    pub max_share: f64,
    pub experts: Vec<ExpertReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingReport {
    pub num_experts: usize,
    pub num_layers: usize,
    pub split_size: usize,
    pub top_n: usize,
    /// mean purity over layers and experts
    pub mean_purity: f64,
    pub layers: Vec<LayerReport>,
}

/// Eval-mode routing statistics over an entire split.
pub fn routing_report(
    model: &mut FusionModel,
    split: &Split,
    batch_size: usize,
    top_n: usize,
) -> Result<RoutingReport> {
    if split.is_empty() {
        return Err(Error::Param("routing_report: empty split".into()));
    }
    if !model.cfg.prompts.dynamic_prompt || model.cfg.single_dynamic {
        return Err(Error::Contract(
            "routing_report needs an expert-routed dynamic prompt".into(),
        ));
    }
    let k = model.cfg.mope.experts;
    let num_layers = model.cfg.main.num_layers;
    // scores[layer][instance][expert]
    let mut scores = vec![vec![vec![0.0f64; k]; split.len()]; num_layers];
    for (base, chunk) in split.chunks(batch_size).enumerate().map(|(c, ch)| (c * batch_size, ch)) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let batch: Vec<&_> = chunk.iter().collect();
        let out = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Eval, None)?;
        for e in &out.record.entries {
            for j in 0..k {
                scores[e.layer][base + e.instance][j] = e.scores.at(0, j);
            }
        }
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut purity_sum = 0.0;
    let mut purity_n = 0usize;
    for (layer, per_instance) in scores.iter().enumerate() {
        let mut importance = vec![0.0f64; k];
        for row in per_instance {
            for j in 0..k {
                importance[j] += row[j];
            }
        }
        let total: f64 = importance.iter().sum();
        let mean = total / k as f64;
        let var = importance.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let cv2 = if mean.abs() < 1e-12 { 0.0 } else { var / (mean * mean) };
        let mut experts = Vec::with_capacity(k);
        for j in 0..k {
            let mut ranked: Vec<usize> = (0..split.len()).collect();
            ranked.sort_by(|&a, &b| {
                per_instance[b][j]
                    .partial_cmp(&per_instance[a][j])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let top: Vec<ExpertTopInstance> = ranked
                .iter()
                .take(top_n)
                .map(|&i| ExpertTopInstance {
                    instance: i,
                    score: per_instance[i][j],
                    cluster: split[i].cluster,
                    label: split[i].label,
                })
                .collect();
            let mut counts = std::collections::HashMap::new();
            for t in &top {
                *counts.entry(t.cluster).or_insert(0usize) += 1;
            }
            let (&majority_cluster, &cnt) = counts
                .iter()
                .max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))
                .unwrap();
            let purity = cnt as f64 / top.len() as f64;
            purity_sum += purity;
            purity_n += 1;
            experts.push(ExpertReport {
                expert: j,
                importance: importance[j],
                importance_share: importance[j] / total,
                top_instances: top,
                majority_cluster,
                purity,
            });
        }
        let max_share = experts
            .iter()
            .map(|e| e.importance_share)
            .fold(0.0f64, f64::max);
        layers.push(LayerReport {
            layer,
            cv2,
            max_share,
            experts,
        });
    }
    Ok(RoutingReport {
        num_experts: k,
        num_layers,
        split_size: split.len(),
        top_n,
        mean_purity: purity_sum / purity_n as f64,
        layers,
    })
}

/// Flat CSV companion: one row per (layer, expert, rank).
pub fn write_top_instances_csv(report: &RoutingReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,expert,rank,instance,score,cluster,label")?;
    for layer in &report.layers {
        for expert in &layer.experts {
            for (rank, t) in expert.top_instances.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{:.12e},{},{}",
                    layer.layer, expert.expert, rank, t.instance, t.score, t.cluster, t.label
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::fusion::{FusionConfig, MopeSettings};

    fn setup(k: usize) -> (FusionModel, crate::data::Dataset) {
        let ds = generate(&SyntheticConfig {
            train_size: 32,
            val_size: 8,
            test_size: 32,
            ..Default::default()
        })
        .unwrap();
        let cfg = FusionConfig {
            mope: MopeSettings {
                experts: k,
                prompt_len: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (FusionModel::new(&cfg, ds.config.d_y, 21).unwrap(), ds)
    }

    #[test]
    fn shares_sum_to_one_per_layer() {
        let (mut model, ds) = setup(4);
        let rep = routing_report(&mut model, &ds.test, 8, 5).unwrap();
        assert_eq!(rep.layers.len(), model.cfg.main.num_layers);
        for layer in &rep.layers {
            let s: f64 = layer.experts.iter().map(|e| e.importance_share).sum();
            assert!((s - 1.0).abs() < 1e-9);
            for e in &layer.experts {
                assert_eq!(e.top_instances.len(), 5);
                assert!(e.purity > 0.0 && e.purity <= 1.0);
            }
        }
    }

    #[test]
    fn untrained_orthogonal_keys_route_near_uniform() {
        let (mut model, ds) = setup(8);
        let rep = routing_report(&mut model, &ds.test, 8, 5).unwrap();
        for layer in &rep.layers {
            assert!(
                layer.max_share <= 2.0 / 8.0,
                "layer {} max share {}",
                layer.layer,
                layer.max_share
            );
        }
    }

    #[test]
    fn report_is_deterministic() {
        let (mut model, ds) = setup(4);
        let a = serde_json::to_string(&routing_report(&mut model, &ds.test, 8, 5).unwrap()).unwrap();
        let b = serde_json::to_string(&routing_report(&mut model, &ds.test, 8, 5).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn static_only_model_is_rejected() {
        let ds = generate(&SyntheticConfig {
            train_size: 8,
            val_size: 8,
            test_size: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = FusionConfig {
            prompts: crate::fusion::PromptFlags {
                static_prompt: true,
                dynamic_prompt: false,
                mapped_prompt: false,
            },
            ..Default::default()
        };
        let mut model = FusionModel::new(&cfg, ds.config.d_y, 1).unwrap();
        assert!(routing_report(&mut model, &ds.test, 8, 5).is_err());
    }
}
