//! Mixture-of-prompt-experts routing.
//!
//! Per prompted layer: learnable prompt experts paired with frozen,
//! orthogonally initialized routing embeddings. The routing query
//! concatenates a cross-modal projection of ψ_y with an inter-modal
//! projection of the previous layer's class token; scores are a
//! temperature softmax over query–key dot products. A coefficient-of-
//! variation importance loss, gradient-gated below a threshold,
//! penalizes dominant experts.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, orthogonal_init, Rng, Tape, Tensor, Var};

/// One layer's experts: learnable prompt matrices [l×d_x] plus a frozen
/// key matrix [k×d_r] whose min-dimension Gram is the identity at init.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    /// stacked frozen routing embeddings, one row per expert
    pub keys: Tensor,
}

impl ExpertBank {
    pub fn init(num_experts: usize, d_r: usize, rng: &mut Rng) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::Config("expert bank needs k >= 1".into()));
        }
        Ok(ExpertBank {
            keys: orthogonal_init(num_experts, d_r, rng)?,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.keys.rows()
    }
}

/// q = [ψ_y·W_y ∥ x_cls·W_x]: cross-modal block first, inter-modal second.
pub fn routing_query(
    tape: &mut Tape,
    x_cls_prev: Var,
    psi_y: Var,
    w_x: Var,
    w_y: Var,
) -> Result<Var> {
    let cross = tape.matmul(psi_y, w_y)?;
    let inter = tape.matmul(x_cls_prev, w_x)?;
    tape.concat_cols(&[cross, inter])
}

/// Routing scores softmax(q·k_j/τ + ε). Noise ε ~ N(0, 1/k) is added only
/// in train mode and skipped for k = 1, where the score is [1] regardless.
pub fn route(
    tape: &mut Tape,
    q: Var,
    keys: &Tensor,
    tau: f64,
    noise_rng: Option<&mut Rng>,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("route: tau must be positive, got {tau}")));
    }
    let k = keys.rows();
    if k == 0 {
        return Err(Error::Config("route: no experts".into()));
    }
    if tape.value(q).cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "route: query dim {} vs key dim {}",
            tape.value(q).cols(),
            keys.cols()
        )));
    }
    let keys_t = tape.constant(keys.transpose())?;
    let logits = tape.matmul(q, keys_t)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let logits = match noise_rng {
        Some(rng) if k > 1 => {
            let eps = rng.normal_tensor(1, k, 0.0, 1.0 / k as f64);
            let eps = tape.constant(eps)?;
            tape.add(logits, eps)?
        }
        _ => logits,
    };
    tape.softmax_rows(logits, 1.0)
}

/// P_d = Σ_j r_j E_j. Gradient flows to the scores and to every expert.
pub fn mix(tape: &mut Tape, scores: Var, experts: &[Var]) -> Result<Var> {
    let k = tape.value(scores).cols();
    if experts.is_empty() || experts.len() != k {
        return Err(Error::Contract(format!(
            "mix: {} scores for {} experts",
            k,
            experts.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (j, &e) in experts.iter().enumerate() {
        let rj = tape.index(scores, j)?;
        let term = tape.scale_by(e, rj)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Per-instance, per-layer routing score snapshot.
#[derive(Clone, Debug)]
pub struct RoutingScore {
    pub instance: usize,
    pub layer: usize,
    pub scores: Tensor,
    /// tape handle when recorded during a live forward pass
    pub var: Option<Var>,
}

/// Batch accumulation of routing scores: exactly one entry per
/// (instance, prompted layer).
#[derive(Clone, Debug, Default)]
pub struct RoutingRecord {
    pub entries: Vec<RoutingScore>,
}

impl RoutingRecord {
    pub fn push(&mut self, score: RoutingScore) {
        self.entries.push(score);
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    /// Imp_j = Σ over batch instances of r_j at `layer` (value level).
    pub fn importance(&self, layer: usize) -> Result<Tensor> {
        let rows: Vec<&RoutingScore> =
            self.entries.iter().filter(|e| e.layer == layer).collect();
        if rows.is_empty() {
            return Err(Error::Contract(format!(
                "importance: no routing entries for layer {layer}"
            )));
        }
        let k = rows[0].scores.cols();
        let mut imp = Tensor::zeros(1, k);
        for r in rows {
            for j in 0..k {
                imp.data_mut()[j] += r.scores.data()[j];
            }
        }
        Ok(imp)
    }

    /// Same sum assembled on the tape, for the differentiable loss path.
    fn importance_var(&self, tape: &mut Tape, layer: usize) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for e in self.entries.iter().filter(|e| e.layer == layer) {
            let v = e.var.ok_or_else(|| {
                Error::Contract("importance_var: record has no tape handles".into())
            })?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        acc.ok_or_else(|| Error::Contract(format!("importance_var: empty layer {layer}")))
    }
}

/// Importance-loss evaluation: value plus per-layer CV² and gate states.
#[derive(Debug)]
pub struct ImportanceLoss {
    pub var: Var,
    pub value: f64,
    pub per_layer_cv2: Vec<f64>,
    /// true = gradient live (CV² ≥ γ), false = stop-gradient gated
    pub gates: Vec<bool>,
}

/// Mean over layers of squared coefficient of variation of expert
/// importance. Layers with CV² < γ contribute their value but zero
/// gradient. `gate_override` forces gate states (used by the gradient
/// checker to freeze gating decisions at a base point).
pub fn importance_loss(
    tape: &mut Tape,
    record: &RoutingRecord,
    gamma: f64,
    gate_override: Option<&[bool]>,
) -> Result<ImportanceLoss> {
    let layers = record.layers();
    if layers.is_empty() {
        return Err(Error::Contract("importance_loss: empty record".into()));
    }
    let mut terms = Vec::with_capacity(layers.len());
    let mut per_layer_cv2 = Vec::with_capacity(layers.len());
    let mut gates = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let imp = record.importance_var(tape, layer)?;
        let k = tape.value(imp).cols();
        let mean = tape.mean_all(imp)?;
        if tape.value(mean).item().abs() < 1e-12 {
            return Err(Error::Numeric(
                "importance_loss: zero mean importance".into(),
            ));
        }
        let cv2 = if k == 1 {
            tape.scale(mean, 0.0)? // single expert: CV is identically zero
        } else {
            let centered = tape.sub_scalar_var(imp, mean)?;
            let sq = tape.mul(centered, centered)?;
            let variance = tape.mean_all(sq)?; // population variance
            let mean_sq = tape.mul(mean, mean)?;
            tape.div(variance, mean_sq)?
        };
        let value = tape.value(cv2).item();
        let live = match gate_override {
            Some(g) => g[li],
            None => value >= gamma,
        };
        per_layer_cv2.push(value);
        gates.push(live);
        terms.push(tape.gate(cv2, live)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let loss = tape.scale(acc, 1.0 / layers.len() as f64)?;
    Ok(ImportanceLoss {
        var: loss,
        value: tape.value(loss).item(),
        per_layer_cv2,
        gates,
    })
}

/// Key orthogonality contract: min-dimension Gram equals identity.
pub fn keys_gram_error(keys: &Tensor) -> f64 {
    let (k, d) = (keys.rows(), keys.cols());
    if k <= d {
        matmul_nt(keys, keys).max_abs_diff(&Tensor::identity(k))
    } else {
        crate::tensor::matmul_tn(keys, keys).max_abs_diff(&Tensor::identity(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn routing_query_concatenates_cross_then_inter() {
        // d_c = 8, d_i = 2 -> d_r = 10
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let cls = tape.constant(rng.normal_tensor(1, 6, 0.0, 1.0)).unwrap();
        let psi = tape.constant(rng.normal_tensor(1, 4, 0.0, 1.0)).unwrap();
        let wx = tape.constant(rng.normal_tensor(6, 2, 0.0, 1.0)).unwrap();
        let wy = tape.constant(rng.normal_tensor(4, 8, 0.0, 1.0)).unwrap();
        let q = routing_query(&mut tape, cls, psi, wx, wy).unwrap();
        assert_eq!(tape.value(q).shape(), [1, 10]);

        // zero inputs -> zero query
        let z1 = tape.constant(Tensor::zeros(1, 6)).unwrap();
        let z2 = tape.constant(Tensor::zeros(1, 4)).unwrap();
        let q0 = routing_query(&mut tape, z1, z2, wx, wy).unwrap();
        assert!(tape.value(q0).data().iter().all(|&x| x == 0.0));

        // perturbing psi changes only the first d_c coordinates
        let psi2 = tape.constant(rng.normal_tensor(1, 4, 0.0, 1.0)).unwrap();
        let q2 = routing_query(&mut tape, cls, psi2, wx, wy).unwrap();
        let (a, b) = (tape.value(q).clone(), tape.value(q2).clone());
        assert!(a.row(0)[..8] != b.row(0)[..8]);
        assert_eq!(&a.row(0)[8..], &b.row(0)[8..]);
    }

    #[test]
    fn route_uniform_for_orthogonal_keys() {
        let mut tape = Tape::new();
        // q orthogonal to every key -> all logits equal -> uniform
        let keys = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let q = tape.constant(Tensor::vector(&[0.0, 0.0, 5.0])).unwrap();
        let r = route(&mut tape, q, &keys, 0.1, None).unwrap();
        assert!(tape.value(r).max_abs_diff(&Tensor::vector(&[0.5, 0.5])) < 1e-12);
    }

    #[test]
    fn route_singleton_is_one() {
        let mut tape = Tape::new();
        let keys = Tensor::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let q = tape.constant(Tensor::vector(&[2.0, 1.0])).unwrap();
        let mut rng = Rng::new(5);
        let r = route(&mut tape, q, &keys, 0.1, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0]);
    }

    #[test]
    fn route_hand_value() {
        // q·k = [0.01, 0.00], tau = 0.1 -> softmax([0.1, 0])
        let mut tape = Tape::new();
        let keys = Tensor::from_rows(&[vec![0.01], vec![0.0]]).unwrap();
        let q = tape.constant(Tensor::vector(&[1.0])).unwrap();
        let r = route(&mut tape, q, &keys, 0.1, None).unwrap();
        assert!((tape.value(r).data()[0] - 0.52498).abs() < 1e-5);
        assert!((tape.value(r).data()[1] - 0.47502).abs() < 1e-5);
    }

    #[test]
    fn route_eval_mode_is_deterministic() {
        let keys = orthogonal_init(4, 6, &mut Rng::new(2)).unwrap();
        let qv = Rng::new(3).normal_tensor(1, 6, 0.0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let q = tape.constant(qv.clone()).unwrap();
            let r = route(&mut tape, q, &keys, 0.1, None).unwrap();
            tape.value(r).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn route_argmax_invariant_to_positive_scaling() {
        let keys = orthogonal_init(5, 8, &mut Rng::new(7)).unwrap();
        let qv = Rng::new(8).normal_tensor(1, 8, 0.0, 1.0);
        let argmax = |scale: f64| {
            let mut tape = Tape::new();
            let q = tape.constant(qv.map(|x| scale * x)).unwrap();
            let r = route(&mut tape, q, &keys, 0.1, None).unwrap();
            tape.value(r)
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = argmax(1.0);
        for s in [0.01, 0.5, 3.0, 40.0] {
            assert_eq!(argmax(s), base);
        }
    }

    #[test]
    fn route_rejects_bad_params() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::vector(&[1.0])).unwrap();
        let keys = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(route(&mut tape, q, &keys, 0.0, None).is_err());
    }

    #[test]
    fn mix_one_hot_returns_expert() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(4);
        let e1 = tape.constant(rng.normal_tensor(2, 3, 0.0, 1.0)).unwrap();
        let e2 = tape.constant(rng.normal_tensor(2, 3, 0.0, 1.0)).unwrap();
        let r = tape.constant(Tensor::vector(&[0.0, 1.0])).unwrap();
        let pd = mix(&mut tape, r, &[e1, e2]).unwrap();
        assert_eq!(tape.value(pd), tape.value(e2));
    }

    #[test]
    fn mix_uniform_is_midpoint() {
        let mut tape = Tape::new();
        let e1 = tape.constant(Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap()).unwrap();
        let e2 = tape.constant(Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap()).unwrap();
        let r = tape.constant(Tensor::vector(&[0.5, 0.5])).unwrap();
        let pd = mix(&mut tape, r, &[e1, e2]).unwrap();
        assert_eq!(tape.value(pd).data(), &[1.0, 3.0]);
    }

    #[test]
    fn mix_single_expert_degenerates() {
        let mut tape = Tape::new();
        let e1 = tape.constant(Rng::new(1).normal_tensor(3, 4, 0.0, 1.0)).unwrap();
        let r = tape.constant(Tensor::vector(&[1.0])).unwrap();
        let pd = mix(&mut tape, r, &[e1]).unwrap();
        assert_eq!(tape.value(pd), tape.value(e1));
    }

    #[test]
    fn mix_is_affine_invariant_over_simplex() {
        let mut rng = Rng::new(11);
        let scores = {
            let mut tape = Tape::new();
            let raw = tape.constant(rng.normal_tensor(1, 3, 0.0, 1.0)).unwrap();
            let s = tape.softmax_rows(raw, 1.0).unwrap();
            tape.value(s).clone()
        };
        let es: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(2, 2, 0.0, 1.0)).collect();
        let shift = rng.normal_tensor(2, 2, 0.0, 1.0);
        let mix_val = |experts: &[Tensor]| {
            let mut tape = Tape::new();
            let r = tape.constant(scores.clone()).unwrap();
            let vars: Vec<Var> = experts
                .iter()
                .map(|e| tape.constant(e.clone()).unwrap())
                .collect();
            let pd = mix(&mut tape, r, &vars).unwrap();
            tape.value(pd).clone()
        };
        let base = mix_val(&es);
        let shifted: Vec<Tensor> = es
            .iter()
            .map(|e| {
                let mut t = e.clone();
                for (a, b) in t.data_mut().iter_mut().zip(shift.data()) {
                    *a += b;
                }
                t
            })
            .collect();
        let moved = mix_val(&shifted);
        let mut expect = base.clone();
        for (a, b) in expect.data_mut().iter_mut().zip(shift.data()) {
            *a += b;
        }
        assert!(moved.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn mix_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let e1 = tape.constant(Tensor::zeros(1, 1)).unwrap();
        let r = tape.constant(Tensor::vector(&[0.5, 0.5])).unwrap();
        assert!(mix(&mut tape, r, &[e1]).is_err());
    }

    fn record_from_rows(rows: &[(usize, usize, Vec<f64>)]) -> RoutingRecord {
        let mut rec = RoutingRecord::default();
        for (instance, layer, scores) in rows {
            rec.push(RoutingScore {
                instance: *instance,
                layer: *layer,
                scores: Tensor::vector(scores),
                var: None,
            });
        }
        rec
    }

    #[test]
    fn importance_sums_over_batch() {
        let rec = record_from_rows(&[
            (0, 0, vec![1.0, 0.0]),
            (1, 0, vec![1.0, 0.0]),
        ]);
        let imp = rec.importance(0).unwrap();
        assert_eq!(imp.data(), &[2.0, 0.0]);
    }

    #[test]
    fn importance_uniform_batch() {
        let rec = record_from_rows(&[
            (0, 0, vec![0.25, 0.25, 0.25, 0.25]),
            (1, 0, vec![0.25, 0.25, 0.25, 0.25]),
            (2, 0, vec![0.25, 0.25, 0.25, 0.25]),
        ]);
        let imp = rec.importance(0).unwrap();
        for &v in imp.data() {
            assert!((v - 3.0 / 4.0).abs() < 1e-15);
        }
        // conservation: sums exactly to the batch size
        assert!((imp.data().iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn importance_empty_record_is_error() {
        let rec = RoutingRecord::default();
        assert!(rec.importance(0).is_err());
    }

    fn loss_of(record_rows: &[(usize, usize, Vec<f64>)], gamma: f64) -> ImportanceLoss {
        let mut tape = Tape::new();
        let mut rec = RoutingRecord::default();
        for (instance, layer, scores) in record_rows {
            let v = tape.leaf(Tensor::vector(scores)).unwrap();
            rec.push(RoutingScore {
                instance: *instance,
                layer: *layer,
                scores: Tensor::vector(scores),
                var: Some(v),
            });
        }
        importance_loss(&mut tape, &rec, gamma, None).unwrap()
    }

    #[test]
    fn importance_loss_hand_values() {
        // Imp = [2, 0]: mean 1, population std 1, CV² = 1
        let l = loss_of(&[(0, 0, vec![1.0, 0.0]), (1, 0, vec![1.0, 0.0])], 0.1);
        assert!((l.value - 1.0).abs() < 1e-12);
        assert!(l.gates[0]);
        // Imp = [3, 1]: mean 2, std 1, CV² = 0.25
        let l = loss_of(&[(0, 0, vec![1.0, 1.0]), (1, 0, vec![2.0, 0.0])], 0.1);
        assert!((l.value - 0.25).abs() < 1e-12);
        // uniform importance: loss 0 and gated
        let l = loss_of(&[(0, 0, vec![0.5, 0.5]), (1, 0, vec![0.5, 0.5])], 0.1);
        assert_eq!(l.value, 0.0);
        assert!(!l.gates[0]);
    }

    #[test]
    fn importance_loss_gradient_gating() {
        // live layer: gradient wrt scores matches finite differences
        let base = vec![0.9, 0.1];
        let eval = |scores: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let mut rec = RoutingRecord::default();
            let v = tape.leaf(scores[0].clone())?;
            rec.push(RoutingScore {
                instance: 0,
                layer: 0,
                scores: scores[0].clone(),
                var: Some(v),
            });
            Ok(importance_loss(&mut tape, &rec, 0.1, Some(&[true]))?.value)
        };
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&base)).unwrap();
        let mut rec = RoutingRecord::default();
        rec.push(RoutingScore {
            instance: 0,
            layer: 0,
            scores: Tensor::vector(&base),
            var: Some(v),
        });
        let loss = importance_loss(&mut tape, &rec, 0.1, None).unwrap();
        assert!(loss.gates[0], "CV² = {} should be live", loss.per_layer_cv2[0]);
        let grads = tape.backward(loss.var).unwrap();
        let analytic = vec![Some(grads.get(v).unwrap().clone())];
        let mut f = eval;
        let err = grad_check(&mut f, &[Tensor::vector(&base)], &analytic, 1e-6).unwrap();
        assert!(err <= 1e-4, "err {err}");

        // gated layer: gradient exactly zero
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&[0.51, 0.49])).unwrap();
        let mut rec = RoutingRecord::default();
        rec.push(RoutingScore {
            instance: 0,
            layer: 0,
            scores: Tensor::vector(&[0.51, 0.49]),
            var: Some(v),
        });
        let loss = importance_loss(&mut tape, &rec, 0.1, None).unwrap();
        assert!(!loss.gates[0]);
        assert!(loss.value > 0.0);
        let grads = tape.backward(loss.var).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn importance_loss_mean_over_layers() {
        let l = loss_of(
            &[
                (0, 0, vec![1.0, 0.0]), // layer 0: CV² = 1
                (0, 1, vec![0.5, 0.5]), // layer 1: CV² = 0
            ],
            0.1,
        );
        assert!((l.value - 0.5).abs() < 1e-12);
        assert_eq!(l.per_layer_cv2.len(), 2);
    }

    #[test]
    fn expert_bank_keys_orthonormal() {
        let bank = ExpertBank::init(16, 10, &mut Rng::new(1)).unwrap();
        assert!(keys_gram_error(&bank.keys) < 1e-9);
        let bank = ExpertBank::init(4, 10, &mut Rng::new(1)).unwrap();
        assert!(keys_gram_error(&bank.keys) < 1e-9);
    }
}
