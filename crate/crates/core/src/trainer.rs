//! Minibatch training of the decomposition head, AdamW with cosine
//! annealing, and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::metrics::{self, MetricsReport};
use crate::model::{decompose_vars, DecompositionVars, MaskMode, ModelConfig, ModelParams, ModelVars};
use crate::rng::{stream, substream};
use crate::synthgen::Dataset;

/// How hybrid features for the purification term are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PurificationMode {
    /// Target universal part plus a donor's non-universal channels.
    #[default]
    Counterfactual,
    /// Target universal part plus isotropic noise with the donor-nuisance scale.
    Gaussian,
    /// Inverted dropout (p = 0.5) on the target universal part.
    Dropout,
    None,
}

impl std::str::FromStr for PurificationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counterfactual" => Ok(Self::Counterfactual),
            "gaussian" => Ok(Self::Gaussian),
            "dropout" => Ok(Self::Dropout),
            "none" => Ok(Self::None),
            other => Err(Error::config("purification_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Per-term switches. A disabled term is left out of the graph entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub cls: bool,
    pub suff: bool,
    pub puri: bool,
    pub align: bool,
    pub sparse: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            cls: true,
            suff: true,
            puri: true,
            align: true,
            sparse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation_flags: AblationFlags,
    pub mask_mode: MaskMode,
    pub purification_mode: PurificationMode,
    /// Expected feature dimension; checked against the dataset when set.
    pub dim: Option<usize>,
    pub model: ModelConfig,
    /// Align fake-generator centroids only (otherwise the real domain too).
    pub align_fake_only: bool,
    /// EMA momentum for the alignment target; `None` aligns to the batch mean.
    pub align_ema: Option<f64>,
    /// Keep a checkpoint every this many epochs; 0 keeps none.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            ablation_flags: AblationFlags::default(),
            mask_mode: MaskMode::Hard,
            purification_mode: PurificationMode::Counterfactual,
            dim: None,
            model: ModelConfig::default(),
            align_fake_only: true,
            align_ema: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 for donor sampling"));
        }
        if !(self.lr_min >= 0.0 && self.lr > self.lr_min && self.lr.is_finite()) {
            return Err(Error::config("lr", "need lr > lr_min >= 0"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if let Some(m) = self.align_ema {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config("align_ema", "momentum must lie in [0, 1)"));
            }
        }
        self.weights.validate()
    }

    fn puri_active(&self) -> bool {
        self.ablation_flags.puri && self.purification_mode != PurificationMode::None
    }
}

/// `lr_min + ½(lr − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Uniform random permutation of `0..n` without fixed points (`n >= 2`).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two elements");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// A minibatch in tape-ready form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub z: Tensor,
    pub y: Vec<u8>,
    pub g: Vec<u16>,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * ds.dim);
        for &i in idx {
            data.extend_from_slice(&ds.samples[i].z);
        }
        Self {
            z: Tensor::new(idx.len(), ds.dim, data).expect("validated dataset"),
            y: idx.iter().map(|&i| ds.samples[i].y).collect(),
            g: idx.iter().map(|&i| ds.samples[i].g).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Inputs to one objective evaluation besides weights and data.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    /// Global step index; keys the donor and noise substreams.
    pub step: u64,
    /// Constant masks replacing the gate-derived ones.
    pub frozen_masks: Option<(&'a Tensor, &'a Tensor)>,
    /// Fixed alignment target (EMA mode).
    pub align_target: Option<&'a [f64]>,
    /// Constant teacher logits `(f_u(z), f_s(z))` for the sufficiency term.
    /// Equivalent to the stop-gradient path; lets finite differences see
    /// the same constant targets as the backward pass.
    pub frozen_teachers: Option<(&'a Tensor, &'a Tensor)>,
}

/// Nodes of one objective evaluation.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub dec: DecompositionVars,
    pub auth_logits: Var,
}

/// Builds the full objective for one batch on `tape`.
pub fn build_step(tape: &mut Tape, vars: &ModelVars, batch: &Batch, ctx: &StepContext) -> Result<StepGraph> {
    let cfg = ctx.config;
    let flags = cfg.ablation_flags;
    let w = cfg.weights;
    let n = batch.len();
    let z = tape.constant(batch.z.clone());

    let (p_u, p_s) = vars.gate(tape, z)?;
    let dec = decompose_vars(tape, z, p_u, p_s, cfg.mask_mode, ctx.frozen_masks)?;
    let auth_logits = vars.auth.forward(tape, dec.z_u)?;

    // (term, weight, logged slot)
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut vals = [0.0f64; 6];
    let scalar = |t: &Tape, v: Var| t.value(v).item();

    if flags.cls {
        let y: Vec<usize> = batch.y.iter().map(|&v| usize::from(v)).collect();
        let g: Vec<usize> = batch.g.iter().map(|&v| usize::from(v)).collect();
        let gen_logits = vars.gen.forward(tape, dec.z_s)?;
        let ca = tape.cross_entropy(auth_logits, &y)?;
        let cg = tape.cross_entropy(gen_logits, &g)?;
        let cls = tape.add(ca, cg)?;
        vals[0] = scalar(tape, cls);
        terms.push((cls, 1.0));
    }
    if flags.suff {
        let gen_s = vars.gen.forward(tape, dec.z_s)?;
        let (auth_full, gen_full) = match ctx.frozen_teachers {
            Some((ta, tg)) => (tape.constant(ta.clone()), tape.constant(tg.clone())),
            None => (vars.auth.forward(tape, z)?, vars.gen.forward(tape, z)?),
        };
        let sa = losses::sufficiency_loss(tape, auth_logits, auth_full)?;
        let sg = losses::sufficiency_loss(tape, gen_s, gen_full)?;
        if w.alpha > 0.0 {
            vals[1] = scalar(tape, sa);
            vals[2] = scalar(tape, sg);
        }
        let both = tape.add(sa, sg)?;
        terms.push((both, w.alpha));
    }
    if cfg.puri_active() && n >= 2 {
        let hybrid = match cfg.purification_mode {
            PurificationMode::Counterfactual => {
                let perm = derangement(n, &mut substream(cfg.seed, stream::DONOR, ctx.step));
                let zd = tape.gather_rows(z, &perm)?;
                let md = tape.gather_rows(dec.m_u, &perm)?;
                losses::make_hybrid(tape, dec.z_u, zd, md)?
            }
            PurificationMode::Gaussian => {
                let perm = derangement(n, &mut substream(cfg.seed, stream::DONOR, ctx.step));
                let zv = tape.value(z);
                let mv = tape.value(dec.m_u);
                let d = zv.cols();
                let mean_norm = perm
                    .iter()
                    .map(|&j| {
                        zv.row_slice(j)
                            .iter()
                            .zip(mv.row_slice(j))
                            .map(|(a, m)| (a * (1.0 - m)).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .sum::<f64>()
                    / n as f64;
                let sigma = mean_norm / (d as f64).sqrt();
                let mut rng = substream(cfg.seed, stream::NOISE, ctx.step);
                let noise: Vec<f64> = (0..n * d)
                    .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); sigma * v })
                    .collect();
                let nv = tape.constant(Tensor::new(n, d, noise)?);
                tape.add(dec.z_u, nv)?
            }
            PurificationMode::Dropout => {
                let (rows, d) = tape.value(dec.z_u).shape();
                let mut rng = substream(cfg.seed, stream::NOISE, ctx.step);
                let keep: Vec<f64> = (0..rows * d)
                    .map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 })
                    .collect();
                let kv = tape.constant(Tensor::new(rows, d, keep)?);
                tape.mul(dec.z_u, kv)?
            }
            PurificationMode::None => unreachable!("filtered by puri_active"),
        };
        let puri = losses::purification_loss(tape, &vars.auth, dec.z_u, hybrid)?;
        if w.beta > 0.0 {
            vals[3] = scalar(tape, puri);
        }
        terms.push((puri, w.beta));
    }
    if flags.align {
        let groups = losses::alignment_groups(&batch.g, &batch.y, cfg.align_fake_only);
        let align = losses::alignment_loss(tape, dec.z_u, &groups, ctx.align_target)?;
        if w.gamma > 0.0 {
            vals[4] = scalar(tape, align);
        }
        terms.push((align, w.gamma));
    }
    if flags.sparse {
        let sp = losses::sparsity_loss(tape, p_u, p_s)?;
        if w.lambda > 0.0 {
            vals[5] = scalar(tape, sp);
        }
        terms.push((sp, w.lambda));
    }

    let mut loss = tape.constant(Tensor::scalar(0.0));
    for (term, weight) in terms {
        let scaled = tape.scale(term, weight);
        loss = tape.add(loss, scaled)?;
    }
    let breakdown = LossBreakdown::weighted(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], &w);
    Ok(StepGraph {
        loss,
        breakdown,
        dec,
        auth_logits,
    })
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub train_bacc: f64,
    /// Mean pairwise distance between per-generator centroids of `z_u`.
    pub centroid_dispersion: f64,
    /// Mean of `‖m_u‖₀ / D`.
    pub mask_density: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Centroid dispersion of the initial parameters over the training set.
    pub initial_dispersion: f64,
    pub epochs: Vec<EpochRecord>,
    /// Loss breakdown of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
}

impl TrainHistory {
    pub const EPOCH_CSV_HEADER: &'static str =
        "epoch,cls,suff_auth,suff_gen,puri,align,sparse,total,train_bacc,centroid_dispersion,mask_density";
    pub const STEP_CSV_HEADER: &'static str = "step,cls,suff_auth,suff_gen,puri,align,sparse,total";

    pub fn epoch_csv(&self) -> String {
        let mut s = format!("{}\n", Self::EPOCH_CSV_HEADER);
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.losses.csv_fields(),
                r.train_bacc,
                r.centroid_dispersion,
                r.mask_density
            ));
        }
        s
    }

    pub fn step_csv(&self) -> String {
        let mut s = format!("{}\n", Self::STEP_CSV_HEADER);
        for (i, b) in self.steps.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i, b.csv_fields()));
        }
        s
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub initial: ModelParams,
    pub history: TrainHistory,
    /// `(epoch, params)` for every checkpoint interval.
    pub checkpoints: Vec<(usize, ModelParams)>,
    pub total_steps: usize,
}

/// Running per-generator sums of `z_u` over fake samples.
#[derive(Default)]
struct CentroidAccumulator {
    sums: BTreeMap<u16, (Vec<f64>, usize)>,
}

impl CentroidAccumulator {
    fn add(&mut self, g: u16, row: &[f64]) {
        let e = self.sums.entry(g).or_insert_with(|| (vec![0.0; row.len()], 0));
        for (s, v) in e.0.iter_mut().zip(row) {
            *s += v;
        }
        e.1 += 1;
    }

    fn centroids(&self) -> Vec<(u16, Vec<f64>)> {
        self.sums
            .iter()
            .map(|(&g, (s, n))| (g, s.iter().map(|v| v / *n as f64).collect()))
            .collect()
    }

    fn dispersion(&self) -> f64 {
        let c = self.centroids();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                total += c[i].1.iter().zip(&c[j].1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

/// Mean pairwise distance between per-generator centroids of the
/// universal component over the fake samples of `ds`.
pub fn centroid_dispersion(params: &ModelParams, ds: &Dataset, mode: MaskMode) -> f64 {
    let mut acc = CentroidAccumulator::default();
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(512) {
        let b = Batch::from_indices(ds, chunk);
        let zu = params.universal_component(&b.z, mode);
        for (r, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            if s.y == 1 {
                acc.add(s.g, zu.row_slice(r));
            }
        }
    }
    acc.dispersion()
}

fn check_dataset(config: &TrainConfig, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(d) = config.dim {
        if d != ds.dim {
            return Err(Error::config("dim", format!("config says D={d}, dataset has D={}", ds.dim)));
        }
    }
    if config.batch_size > ds.len() {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training samples", config.batch_size, ds.len()),
        ));
    }
    if let Some(s) = ds.samples.iter().find(|s| usize::from(s.g) > ds.n_generators) {
        return Err(Error::invalid(format!(
            "training sample has generator id {} but only {} generators are trainable",
            s.g, ds.n_generators
        )));
    }
    ds.validate()
}

/// Runs the training loop.
pub fn train(config: &TrainConfig, ds: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    check_dataset(config, ds)?;

    let mut params = ModelParams::init(ds.dim, ds.n_generators, &config.model, config.seed)?;
    let frozen_gate = config.mask_mode == MaskMode::Random;
    if frozen_gate {
        params.randomize_masks(config.seed);
    }
    let initial = params.clone();

    let n = ds.len();
    let b = config.batch_size;
    let steps_per_epoch = n.div_ceil(b);
    let total_steps = config.epochs * steps_per_epoch;
    let mut states: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::new(t.len())).collect();
    let mut ema: BTreeMap<u16, Vec<f64>> = BTreeMap::new();

    let mut history = TrainHistory {
        initial_dispersion: centroid_dispersion(&params, ds, config.mask_mode),
        ..Default::default()
    };
    let mut checkpoints = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, stream::SHUFFLE, epoch as u64));

        let mut sum = LossBreakdown::default();
        let mut preds = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        let mut density = 0.0;
        let mut centroids = CentroidAccumulator::default();

        for idx in order.chunks(b) {
            let batch = Batch::from_indices(ds, idx);
            let target = config.align_ema.and_then(|_| {
                (!ema.is_empty()).then(|| {
                    let d = ds.dim;
                    let mut t = vec![0.0; d];
                    for c in ema.values() {
                        for (a, v) in t.iter_mut().zip(c) {
                            *a += v / ema.len() as f64;
                        }
                    }
                    t
                })
            });
            let ctx = StepContext {
                config,
                step: step as u64,
                frozen_masks: None,
                align_target: target.as_deref(),
                frozen_teachers: None,
            };
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let graph = build_step(&mut tape, &vars, &batch, &ctx)?;
            let grads = tape.backward(graph.loss)?;

            // Bookkeeping from the forward pass, before the update.
            let logits = tape.value(graph.auth_logits);
            let zu = tape.value(graph.dec.z_u);
            let mu = tape.value(graph.dec.m_u);
            for r in 0..batch.len() {
                let l = logits.row_slice(r);
                preds.push(u8::from(l[1] >= l[0]));
                truths.push(batch.y[r]);
                density += mu.row_slice(r).iter().filter(|&&m| m != 0.0).count() as f64 / ds.dim as f64;
                if batch.y[r] == 1 {
                    centroids.add(batch.g[r], zu.row_slice(r));
                }
            }
            if let Some(m) = config.align_ema {
                let groups = losses::alignment_groups(&batch.g, &batch.y, config.align_fake_only);
                for (g, rows) in groups {
                    let mut c = vec![0.0; ds.dim];
                    for &r in &rows {
                        for (a, v) in c.iter_mut().zip(zu.row_slice(r)) {
                            *a += v / rows.len() as f64;
                        }
                    }
                    let e = ema.entry(g).or_insert_with(|| c.clone());
                    for (a, v) in e.iter_mut().zip(&c) {
                        *a = m * *a + (1.0 - m) * v;
                    }
                }
            }
            sum.add_scaled(&graph.breakdown, 1.0);
            history.steps.push(graph.breakdown);

            let lr = cosine_lr(step, total_steps, config.lr, config.lr_min);
            let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
            for (ti, (tensor, state)) in params.tensors_mut().into_iter().zip(states.iter_mut()).enumerate() {
                if frozen_gate && ti < ModelParams::GATE_TENSORS {
                    continue;
                }
                let g = grads.get_or_zeros(vars.all[ti], shapes[ti]);
                adamw_step(tensor.data_mut(), g.data(), state, lr, config.weight_decay);
            }
            step += 1;
        }

        let mut losses = LossBreakdown::default();
        losses.add_scaled(&sum, 1.0 / steps_per_epoch as f64);
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            losses,
            train_bacc: metrics::balanced_accuracy(&preds, &truths)?.value,
            centroid_dispersion: centroids.dispersion(),
            mask_density: density / n as f64,
        });
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            let mut c = params.clone();
            c.quantize_f32();
            checkpoints.push((epoch + 1, c));
        }
    }
    params.quantize_f32();
    Ok(TrainOutput {
        params,
        initial,
        history,
        checkpoints,
        total_steps,
    })
}

/// Checks that a model can be applied to a dataset.
pub fn check_compatible(params: &ModelParams, ds: &Dataset) -> Result<()> {
    if params.dim != ds.dim {
        return Err(Error::shape(format!("model has D={}, dataset has D={}", params.dim, ds.dim)));
    }
    Ok(())
}

/// Authenticity predictions and `p_fake` for every sample, in order.
pub fn predict(params: &ModelParams, ds: &Dataset, mode: MaskMode) -> Result<(Vec<u8>, Vec<f64>)> {
    check_compatible(params, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(256).collect();
    let out = crate::par::map_slice(&chunks, |chunk| {
        params.infer_batch(&Batch::from_indices(ds, chunk).z, mode)
    });
    let preds = out.iter().flatten().map(|p| p.label).collect();
    let probs = out.iter().flatten().map(|p| p.p_fake).collect();
    Ok((preds, probs))
}

/// bAcc and NLL of the universal-mask inference path.
pub fn evaluate(params: &ModelParams, ds: &Dataset, mode: MaskMode) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (preds, probs) = predict(params, ds, mode)?;
    let truths = ds.labels();
    let bacc = metrics::balanced_accuracy(&preds, &truths)?;
    Ok(MetricsReport {
        bacc: bacc.value,
        nll: metrics::nll(&probs, &truths)?,
        silhouette_auth: None,
        silhouette_gen: None,
        knn_auth: None,
        knn_gen: None,
        mask_iou_u: None,
        mask_iou_s: None,
        n_samples: ds.len(),
        degenerate: bacc.degenerate,
    })
}

/// Mean of `‖J δ‖ / (‖J‖_F ‖δ‖)` over the dataset, with `J` the auth-head
/// Jacobian at each sample's `z_u` and `δ` the non-universal part of a
/// donor drawn by a fixed derangement.
pub fn ortho_projection(params: &ModelParams, ds: &Dataset, mode: MaskMode, seed: u64) -> Result<f64> {
    check_compatible(params, ds)?;
    if ds.len() < 2 {
        return Err(Error::invalid("need at least two samples to draw donors"));
    }
    let perm = derangement(ds.len(), &mut substream(seed, stream::DONOR, u64::MAX));
    let all: Vec<usize> = (0..ds.len()).collect();
    let batch = Batch::from_indices(ds, &all);
    let decs = params.decompose_batch(&batch.z, mode);
    let vals = crate::par::map_indexed(ds.len(), |i| {
        let d = &decs[perm[i]];
        let z = batch.z.row_slice(perm[i]);
        let delta: Vec<f64> = z.iter().zip(&d.m_u).map(|(a, m)| a * (1.0 - m)).collect();
        losses::gradient_projection(&params.auth, &decs[i].z_u, &delta)
    });
    Ok(vals.iter().sum::<f64>() / ds.len() as f64)
}

/// Per-tensor result of a finite-difference check of the full objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, worst relative error, entries checked)`.
    pub groups: Vec<(String, f64, usize)>,
}

/// Names of [`ModelParams::tensors`], in order.
pub fn tensor_names(params: &ModelParams) -> Vec<String> {
    let head = |prefix: &str, n: usize| -> Vec<String> {
        let layers: &[&str] = if n == 2 { &["w", "b"] } else { &["w1", "b1", "w2", "b2"] };
        layers.iter().map(|l| format!("{prefix}.{l}")).collect()
    };
    let mut names: Vec<String> = ["gate.w1", "gate.b1", "gate.w2", "gate.b2"].iter().map(|s| s.to_string()).collect();
    let t = params.tensors();
    let n_auth = match params.auth {
        crate::model::Head::Linear(_) => 2,
        crate::model::Head::Mlp(..) => 4,
    };
    names.extend(head("auth", n_auth));
    names.extend(head("gen", t.len() - names.len()));
    names
}

/// Compares reverse-mode gradients of the full objective against central
/// differences, with the masks frozen at their current values. At most
/// `max_entries` seeded entries per tensor are checked (`None` = all).
pub fn check_loss_gradient(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    eps: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    config.validate()?;
    if batch.z.cols() != params.dim {
        return Err(Error::shape(format!("model has D={}, batch has D={}", params.dim, batch.z.cols())));
    }
    let (pu, ps) = params.gate_probs_batch(&batch.z);
    let freeze = |p: &Tensor| -> Tensor {
        match config.mask_mode {
            MaskMode::Soft => p.clone(),
            MaskMode::Hard | MaskMode::Random => {
                let v = p.data().iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
                Tensor::new(p.rows(), p.cols(), v).expect("binary")
            }
        }
    };
    let (mu, ms) = (freeze(&pu), freeze(&ps));
    let teacher_auth = params.auth.forward(&batch.z);
    let teacher_gen = params.gen.forward(&batch.z);
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut rng = substream(seed, stream::SUBSAMPLE, 1);
    let entries: Vec<Vec<usize>> = tensors
        .iter()
        .map(|t| match max_entries {
            Some(m) if m < t.len() => {
                let mut v = rand::seq::index::sample(&mut rng, t.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..t.len()).collect(),
        })
        .collect();
    let ctx = StepContext {
        config,
        step: 0,
        frozen_masks: Some((&mu, &ms)),
        align_target: None,
        frozen_teachers: Some((&teacher_auth, &teacher_gen)),
    };
    let worst = crate::autodiff::grad_check_entries(&tensors, &entries, eps, |tape, vars| {
        let mv = ModelVars::from_slice(vars, params);
        Ok(build_step(tape, &mv, batch, &ctx)?.loss)
    })?;
    let groups: Vec<(String, f64, usize)> = tensor_names(params)
        .into_iter()
        .zip(worst.iter().zip(&entries))
        .map(|(n, (w, e))| (n, *w, e.len()))
        .collect();
    Ok(GradCheckReport {
        max_rel_error: worst.into_iter().fold(0.0, f64::max),
        groups,
    })
}
