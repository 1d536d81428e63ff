//! Instance-wise prompt decomposition and the full fusion model.
//!
//! The main encoder's per-layer prompt is assembled from up to three
//! parts: a globally shared static prompt, a dynamic prompt mixed from
//! prompt experts by the multimodal router, and a mapped prompt projected
//! from the complementary feature through a bottleneck MLP. Any subset of
//! the three can be disabled, down to plain vanilla prompt tuning or the
//! frozen baseline.

use crate::data::SyntheticInstance;
use crate::encoder::{
    encode_complementary, encode_main, encode_main_batch, BatchPromptProvider, EncoderConfig,
    EncoderWeights,
};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::router::{mix, route, routing_query, ExpertBank, RoutingRecord, RoutingScore};
use crate::tensor::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PromptFlags {
    pub static_prompt: bool,
    pub dynamic_prompt: bool,
    pub mapped_prompt: bool,
}

impl Default for PromptFlags {
    fn default() -> Self {
        PromptFlags {
            static_prompt: true,
            dynamic_prompt: true,
            mapped_prompt: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MopeSettings {
    /// number of prompt experts k
    pub experts: usize,
    /// prompt length l (rows per static prompt and per expert)
    pub prompt_len: usize,
    /// cross-modal routing dim (from ψ_y)
    pub d_c: usize,
    /// inter-modal routing dim (from the previous class token)
    pub d_i: usize,
    pub tau: f64,
    pub gamma: f64,
    /// routing noise in train mode
    pub noise: bool,
    /// keys are frozen by default; kept for config completeness
    pub learned_keys: bool,
    pub prompt_dropout: f64,
}

impl Default for MopeSettings {
    fn default() -> Self {
        MopeSettings {
            experts: 16,
            prompt_len: 6,
            d_c: 8,
            d_i: 2,
            tau: 0.1,
            gamma: 0.1,
            noise: true,
            learned_keys: false,
            prompt_dropout: 0.1,
        }
    }
}

impl MopeSettings {
    pub fn d_r(&self) -> usize {
        self.d_c + self.d_i
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub main: EncoderConfig,
    pub complementary: EncoderConfig,
    pub num_classes: usize,
    /// l′ vanilla prompts per complementary layer
    pub comp_prompt_len: usize,
    pub prompts: PromptFlags,
    pub mope: MopeSettings,
    /// replace MoPE with one learnable dynamic prompt (degeneracy model)
    pub single_dynamic: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            main: EncoderConfig {
                num_layers: 2,
                d_model: 32,
                num_heads: 2,
                d_ff: 64,
                seq_len: 16,
                vocab: Some(16),
            },
            complementary: EncoderConfig {
                num_layers: 1,
                d_model: 8,
                num_heads: 2,
                d_ff: 16,
                seq_len: 3,
                vocab: None,
            },
            num_classes: 4,
            comp_prompt_len: 4,
            prompts: PromptFlags::default(),
            mope: MopeSettings::default(),
            single_dynamic: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        self.complementary.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.prompts.dynamic_prompt && !self.single_dynamic {
            if self.mope.experts == 0 {
                return Err(Error::Config("dynamic prompt needs k >= 1 experts".into()));
            }
            if self.mope.tau <= 0.0 {
                return Err(Error::Config("tau must be positive".into()));
            }
            if self.mope.d_r() == 0 {
                return Err(Error::Config("d_c + d_i must be positive".into()));
            }
            if self.mope.learned_keys {
                return Err(Error::Config(
                    "learned routing keys are not supported; keys are frozen".into(),
                ));
            }
        }
        if self.mope.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mope.prompt_dropout) {
            return Err(Error::Config("prompt_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LayerPrompts {
    statics: Option<ParamId>,
    experts: Vec<ParamId>,
    bank: Option<ExpertBank>,
    w_x: Option<ParamId>,
    w_y: Option<ParamId>,
    single_dynamic: Option<ParamId>,
}

/// Bottleneck mapper f_m: down-projection, batch norm, GeLU, and one
/// up-projection per registered target dimension.
pub struct Mapper {
    down: ParamId,
    bn_gain: ParamId,
    bn_bias: ParamId,
    ups: BTreeMap<usize, ParamId>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    momentum: f64,
    pub d_bot: usize,
}

pub struct ForwardStreams {
    pub dropout: Rng,
    pub route_noise: Rng,
}

impl ForwardStreams {
    pub fn new(seed: u64) -> Self {
        ForwardStreams {
            dropout: Rng::named(seed, "train/dropout"),
            route_noise: Rng::named(seed, "train/route-noise"),
        }
    }
}

pub struct BatchForward {
    /// stacked logits [b×C]
    pub logits: Var,
    pub record: RoutingRecord,
}

pub struct FusionModel {
    pub cfg: FusionConfig,
    /// raw complementary input dimension (the data's y vector)
    pub data_dy: usize,
    pub seed: u64,
    pub main_weights: EncoderWeights,
    pub comp_weights: EncoderWeights,
    layers: Vec<LayerPrompts>,
    mapper: Option<Mapper>,
    comp_prompts: Vec<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
    pub store: ParamStore,
}

fn prompt_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    // uniform prompt init with eta from the embedding dim and prompt length
    let eta = (6.0 / (cols + rows) as f64).sqrt();
    rng.uniform_tensor(rows, cols, -eta, eta)
}

impl FusionModel {
    pub fn new(cfg: &FusionConfig, data_dy: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d_x = cfg.main.d_model;
        let d_y = cfg.complementary.d_model;
        let main_weights =
            EncoderWeights::init_token_encoder(&cfg.main, &mut Rng::named(seed, "init/enc-main"))?;
        let comp_weights = EncoderWeights::init_vector_encoder(
            &cfg.complementary,
            data_dy,
            &mut Rng::named(seed, "init/enc-comp"),
        )?;
        let mut store = ParamStore::new();
        let mope = &cfg.mope;
        let mut layers = Vec::with_capacity(cfg.main.num_layers);
        for i in 0..cfg.main.num_layers {
            let statics = cfg.prompts.static_prompt.then(|| {
                store.register(
                    &format!("static.layer{i}"),
                    prompt_init(mope.prompt_len, d_x, &mut Rng::named(seed, &format!("init/static-{i}"))),
                    ParamGroup::Main,
                )
            });
            let mut experts = Vec::new();
            let mut bank = None;
            let mut w_x = None;
            let mut w_y = None;
            let mut single_dynamic = None;
            if cfg.prompts.dynamic_prompt {
                if cfg.single_dynamic {
                    single_dynamic = Some(store.register(
                        &format!("dynamic.layer{i}"),
                        prompt_init(
                            mope.prompt_len,
                            d_x,
                            &mut Rng::named(seed, &format!("init/expert-{i}-0")),
                        ),
                        ParamGroup::Main,
                    ));
                } else {
                    for j in 0..mope.experts {
                        experts.push(store.register(
                            &format!("expert.layer{i}.{j}"),
                            prompt_init(
                                mope.prompt_len,
                                d_x,
                                &mut Rng::named(seed, &format!("init/expert-{i}-{j}")),
                            ),
                            ParamGroup::Main,
                        ));
                    }
                    bank = Some(ExpertBank::init(
                        mope.experts,
                        mope.d_r(),
                        &mut Rng::named(seed, &format!("init/keys-{i}")),
                    )?);
                    // small router init keeps the untrained routing close
                    // to uniform despite the sharp temperature
                    let mut r = Rng::named(seed, &format!("init/router-{i}"));
                    w_x = Some(store.register(
                        &format!("router.layer{i}.w_x"),
                        r.normal_tensor(d_x, mope.d_i, 0.0, 0.01 / (d_x as f64).sqrt()),
                        ParamGroup::Main,
                    ));
                    w_y = Some(store.register(
                        &format!("router.layer{i}.w_y"),
                        r.normal_tensor(d_y, mope.d_c, 0.0, 0.01 / (d_y as f64).sqrt()),
                        ParamGroup::Main,
                    ));
                }
            }
            layers.push(LayerPrompts {
                statics,
                experts,
                bank,
                w_x,
                w_y,
                single_dynamic,
            });
        }
        let mapper = if cfg.prompts.mapped_prompt {
            let d_bot = d_y.div_ceil(2);
            let mut r = Rng::named(seed, "init/mapper");
            let down = store.register(
                "mapper.down",
                r.normal_tensor(d_y, d_bot, 0.0, (1.0 / d_y as f64).sqrt()),
                ParamGroup::Main,
            );
            let bn_gain = store.register(
                "mapper.bn_gain",
                Tensor::new(vec![1, d_bot], vec![1.0; d_bot]).unwrap(),
                ParamGroup::Main,
            );
            let bn_bias = store.register("mapper.bn_bias", Tensor::zeros(1, d_bot), ParamGroup::Main);
            let mut ups = BTreeMap::new();
            // one up-projection per distinct main-layer embedding dim;
            // a single dim at desk scale, but the container admits more
            ups.insert(
                d_x,
                store.register(
                    &format!("mapper.up{d_x}"),
                    r.normal_tensor(d_bot, d_x, 0.0, (1.0 / d_bot as f64).sqrt()),
                    ParamGroup::Main,
                ),
            );
            Some(Mapper {
                down,
                bn_gain,
                bn_bias,
                ups,
                running_mean: Tensor::zeros(1, d_bot),
                running_var: Tensor::new(vec![1, d_bot], vec![1.0; d_bot]).unwrap(),
                momentum: 0.1,
                d_bot,
            })
        } else {
            None
        };
        let mut comp_prompts = Vec::new();
        if cfg.comp_prompt_len > 0 {
            let mut r = Rng::named(seed, "init/comp-prompts");
            for i in 0..cfg.complementary.num_layers {
                comp_prompts.push(store.register(
                    &format!("comp_prompt.layer{i}"),
                    prompt_init(cfg.comp_prompt_len, d_y, &mut r),
                    ParamGroup::Complementary,
                ));
            }
        }
        let mut hr = Rng::named(seed, "init/head");
        let head_w = store.register(
            "head.w",
            hr.normal_tensor(d_x, cfg.num_classes, 0.0, (1.0 / d_x as f64).sqrt()),
            ParamGroup::Main,
        );
        let head_b = store.register("head.b", Tensor::zeros(1, cfg.num_classes), ParamGroup::Main);
        Ok(FusionModel {
            cfg: cfg.clone(),
            data_dy,
            seed,
            main_weights,
            comp_weights,
            layers,
            mapper,
            comp_prompts,
            head_w,
            head_b,
            store,
        })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.total_scalars()
    }

    pub fn mapper_running_stats(&self) -> Option<(&Tensor, &Tensor)> {
        self.mapper.as_ref().map(|m| (&m.running_mean, &m.running_var))
    }

    pub fn set_mapper_running_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        let m = self
            .mapper
            .as_mut()
            .ok_or_else(|| Error::Contract("no mapper in this model".into()))?;
        if mean.shape() != [1, m.d_bot] || var.shape() != [1, m.d_bot] {
            return Err(Error::Shape("running stats shape".into()));
        }
        m.running_mean = mean;
        m.running_var = var;
        Ok(())
    }

    pub fn routing_keys(&self, layer: usize) -> Option<&Tensor> {
        self.layers[layer].bank.as_ref().map(|b| &b.keys)
    }

    /// Per-layer tunable prompt rows: l·(static) + l·(dynamic) + 1·(mapped).
    pub fn prompt_rows_per_layer(&self) -> usize {
        let l = self.cfg.mope.prompt_len;
        let mut rows = 0;
        if self.cfg.prompts.static_prompt {
            rows += l;
        }
        if self.cfg.prompts.dynamic_prompt {
            rows += l;
        }
        if self.cfg.prompts.mapped_prompt {
            rows += 1;
        }
        rows
    }

    fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor {
        let mut mask = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let keep = !rng.bernoulli(p);
            if keep {
                let scale = 1.0 / (1.0 - p);
                for j in 0..cols {
                    mask.data_mut()[i * cols + j] = scale;
                }
            }
        }
        mask
    }

    fn apply_prompt_dropout(
        &self,
        tape: &mut Tape,
        prompts: Var,
        mode: Mode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let p = self.cfg.mope.prompt_dropout;
        match (mode, dropout_rng) {
            (Mode::Train, Some(rng)) if p > 0.0 => {
                let v = tape.value(prompts);
                let mask = Self::dropout_mask(v.rows(), v.cols(), p, rng);
                let mask = tape.constant(mask)?;
                tape.mul(prompts, mask)
            }
            _ => Ok(prompts),
        }
    }

    /// Mapped prompts for a batch of complementary features. Batch norm
    /// uses batch statistics in train mode (falling back to running
    /// statistics for a batch of one) and running statistics in eval.
    fn map_features(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        psis: &[Var],
        target_dim: usize,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mapper = self
            .mapper
            .as_ref()
            .ok_or_else(|| Error::Contract("mapped prompt disabled".into()))?;
        let up = *mapper.ups.get(&target_dim).ok_or_else(|| {
            Error::Config(format!("no mapper up-projection for dim {target_dim}"))
        })?;
        let down = binder.var(tape, &self.store, mapper.down)?;
        let gain = binder.var(tape, &self.store, mapper.bn_gain)?;
        let bias = binder.var(tape, &self.store, mapper.bn_bias)?;
        let up = binder.var(tape, &self.store, up)?;
        let b = psis.len();
        let bots: Vec<Var> = psis
            .iter()
            .map(|&psi| tape.matmul(psi, down))
            .collect::<Result<_>>()?;
        let x = tape.concat_rows(&bots)?; // [b×d_bot]
        let use_batch_stats = mode == Mode::Train && b >= 2;
        let normed = if use_batch_stats {
            let d_bot = mapper.d_bot;
            let ones = tape.constant(Tensor::new(vec![1, b], vec![1.0 / b as f64; b])?)?;
            let mean = tape.matmul(ones, x)?; // [1×d_bot]
            let neg_mean = tape.scale(mean, -1.0)?;
            let centered = tape.add_row(x, neg_mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.matmul(ones, sq)?;
            let var_eps = tape.add_scalar(var, 1e-5)?;
            let inv_std = tape.pow_elem(var_eps, -0.5)?;
            let xhat = tape.mul_row(centered, inv_std)?;
            // update running statistics (value level, population variance)
            let mean_v = tape.value(mean).clone();
            let var_v = tape.value(var).clone();
            let m = self.mapper.as_mut().unwrap();
            for j in 0..d_bot {
                m.running_mean.data_mut()[j] =
                    (1.0 - m.momentum) * m.running_mean.data()[j] + m.momentum * mean_v.data()[j];
                m.running_var.data_mut()[j] =
                    (1.0 - m.momentum) * m.running_var.data()[j] + m.momentum * var_v.data()[j];
            }
            xhat
        } else {
            let m = self.mapper.as_ref().unwrap();
            let neg_mean = tape.constant(m.running_mean.map(|v| -v))?;
            let inv_std = tape.constant(m.running_var.map(|v| 1.0 / (v + 1e-5).sqrt()))?;
            let centered = tape.add_row(x, neg_mean)?;
            tape.mul_row(centered, inv_std)?
        };
        let affine = tape.mul_row(normed, gain)?;
        let affine = tape.add_row(affine, bias)?;
        let act = tape.gelu(affine)?;
        let mapped = tape.matmul(act, up)?; // [b×target_dim]
        (0..b).map(|i| tape.slice_rows(mapped, i, i + 1)).collect()
    }

    /// Single-instance mapped prompt (running statistics path).
    pub fn map_feature(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        psi: Var,
        target_dim: usize,
        mode: Mode,
    ) -> Result<Var> {
        Ok(self.map_features(tape, binder, &[psi], target_dim, mode)?[0])
    }

    pub fn encode_complementary_instance(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        instance: &SyntheticInstance,
        mode: Mode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if instance.y.len() != self.data_dy {
            return Err(Error::Data(format!(
                "instance y dim {} vs model {}",
                instance.y.len(),
                self.data_dy
            )));
        }
        let y = tape.constant(instance.y_tensor())?;
        let mut prompts = Vec::with_capacity(self.comp_prompts.len());
        let mut rng = dropout_rng;
        for &pid in &self.comp_prompts {
            let p = binder.var(tape, &self.store, pid)?;
            let p = self.apply_prompt_dropout(tape, p, mode, rng.as_deref_mut())?;
            prompts.push(p);
        }
        encode_complementary(tape, y, &prompts, &self.cfg.complementary, &self.comp_weights)
    }

    /// Assemble the per-layer prompt [P_s, P_d, P_m] for one instance.
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer_idx: usize,
        cls_prev: Var,
        psi: Var,
        mapped: Option<Var>,
        record: &mut RoutingRecord,
        instance_idx: usize,
        mode: Mode,
        noise_rng: Option<&mut Rng>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Option<Var>> {
        let lp = &self.layers[layer_idx];
        let mut parts: Vec<Var> = Vec::new();
        if let Some(pid) = lp.statics {
            parts.push(binder.var(tape, &self.store, pid)?);
        }
        if self.cfg.prompts.dynamic_prompt {
            if let Some(pid) = lp.single_dynamic {
                parts.push(binder.var(tape, &self.store, pid)?);
            } else {
                let w_x = binder.var(tape, &self.store, lp.w_x.unwrap())?;
                let w_y = binder.var(tape, &self.store, lp.w_y.unwrap())?;
                let q = routing_query(tape, cls_prev, psi, w_x, w_y)?;
                let keys = &lp.bank.as_ref().unwrap().keys;
                let noise = if mode == Mode::Train && self.cfg.mope.noise {
                    noise_rng
                } else {
                    None
                };
                let scores = route(tape, q, keys, self.cfg.mope.tau, noise)?;
                record.push(RoutingScore {
                    instance: instance_idx,
                    layer: layer_idx,
                    scores: tape.value(scores).clone(),
                    var: Some(scores),
                });
                let experts: Vec<Var> = lp
                    .experts
                    .iter()
                    .map(|&pid| binder.var(tape, &self.store, pid))
                    .collect::<Result<_>>()?;
                parts.push(mix(tape, scores, &experts)?);
            }
        }
        if let Some(m) = mapped {
            parts.push(m);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        let assembly = tape.concat_rows(&parts)?;
        let assembly = self.apply_prompt_dropout(tape, assembly, mode, dropout_rng)?;
        Ok(Some(assembly))
    }

    /// Full forward pass over a batch. Returns stacked logits [b×C] and
    /// the routing record (one entry per instance per routed layer).
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&SyntheticInstance],
        mode: Mode,
        mut streams: Option<&mut ForwardStreams>,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Param("forward_batch: empty batch".into()));
        }
        // phase 1: complementary features, skipped entirely when no prompt
        // consumes them (routing queries and the mapped prompt do)
        let needs_psi = self.cfg.prompts.dynamic_prompt || self.cfg.prompts.mapped_prompt;
        let mut psis = Vec::with_capacity(batch.len());
        if needs_psi {
            for inst in batch {
                let dr = streams.as_deref_mut().map(|s| &mut s.dropout);
                psis.push(self.encode_complementary_instance(tape, binder, inst, mode, dr)?);
            }
        } else {
            let zero = tape.constant(Tensor::zeros(1, self.cfg.complementary.d_model))?;
            psis.resize(batch.len(), zero);
        }
        // phase 2: mapped prompts (batch-normalized together)
        let d_x = self.cfg.main.d_model;
        let mapped: Vec<Option<Var>> = if self.cfg.prompts.mapped_prompt {
            self.map_features(tape, binder, &psis, d_x, mode)?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None; batch.len()]
        };
        // phase 3: prompted main encoding, dense work stacked across the batch
        let mut record = RoutingRecord::default();
        struct Provider<'m> {
            model: &'m FusionModel,
            binder: &'m mut Binder,
            psis: &'m [Var],
            mapped: &'m [Option<Var>],
            record: &'m mut RoutingRecord,
            mode: Mode,
            streams: Option<&'m mut ForwardStreams>,
        }
        impl BatchPromptProvider for Provider<'_> {
            fn assembly(
                &mut self,
                tape: &mut Tape,
                layer: usize,
                instance: usize,
                cls_prev: Var,
            ) -> Result<Option<Var>> {
                let (noise, dropout) = match self.streams.as_deref_mut() {
                    Some(s) => (Some(&mut s.route_noise), Some(&mut s.dropout)),
                    None => (None, None),
                };
                self.model.assemble(
                    tape,
                    self.binder,
                    layer,
                    cls_prev,
                    self.psis[instance],
                    self.mapped[instance],
                    self.record,
                    instance,
                    self.mode,
                    noise,
                    dropout,
                )
            }
        }
        let tokens: Vec<&[usize]> = batch.iter().map(|inst| inst.x.as_slice()).collect();
        let cls = {
            let mut provider = Provider {
                model: self,
                binder,
                psis: &psis,
                mapped: &mapped,
                record: &mut record,
                mode,
                streams: streams.as_deref_mut(),
            };
            encode_main_batch(
                tape,
                &tokens,
                &mut provider,
                &self.cfg.main,
                &self.main_weights,
            )?
        };
        let stacked = tape.concat_rows(&cls)?;
        let hw = binder.var(tape, &self.store, self.head_w)?;
        let hb = binder.var(tape, &self.store, self.head_b)?;
        let logits = tape.matmul(stacked, hw)?;
        let logits = tape.add_row(logits, hb)?;
        Ok(BatchForward { logits, record })
    }

    /// Unprompted frozen-encoder + head baseline for the same instance.
    pub fn baseline_forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        instance: &SyntheticInstance,
    ) -> Result<Var> {
        let cls = encode_main(
            tape,
            &instance.x,
            &mut crate::encoder::NoPrompts,
            &self.cfg.main,
            &self.main_weights,
        )?;
        let hw = binder.var(tape, &self.store, self.head_w)?;
        let hb = binder.var(tape, &self.store, self.head_b)?;
        let logits = tape.matmul(cls, hw)?;
        tape.add_row(logits, hb)
    }
}
