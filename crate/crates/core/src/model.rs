//! Gating network, cascaded hard-mask decomposition, and the two
//! classifier heads.
//!
//! The gate maps `z` (D) through one ReLU hidden layer (H) to 2D logits whose
//! sigmoids are `(p_u, p_s)`. The authenticity head `f_u` maps D to 2 logits
//! (`[real, fake]`), the generator head `f_s` maps D to K+1 logits with class
//! 0 reserved for the real domain.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, softmax, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, substream};

/// Gate output bias magnitude used to encode fixed random masks.
pub const RANDOM_MASK_LOGIT: f64 = 8.0;

/// How probabilities become masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// `m = 1{p > 0.5}` forward, identity backward.
    #[default]
    Hard,
    /// `m = p`.
    Soft,
    /// Hard masks from a frozen gate whose output is a fixed random pattern.
    Random,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            "random" => Ok(MaskMode::Random),
            other => Err(Error::config("mask_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Classifier head architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadKind {
    #[default]
    Linear,
    /// One sigmoid hidden layer of the given width.
    Mlp { hidden: usize },
}

/// Architecture and initialization choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Gate hidden width; `None` means `2 * D`.
    pub hidden: Option<usize>,
    pub auth_head: HeadKind,
    pub gen_head: HeadKind,
    /// Initial gate output bias; positive values start with masks open.
    pub gate_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            auth_head: HeadKind::Linear,
            gen_head: HeadKind::Linear,
            gate_bias_init: 0.0,
        }
    }
}

/// `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn random(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            w: Tensor::new(fan_in, fan_out, w).expect("finite init"),
            b: Tensor::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = matmul(x, &self.w);
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        out
    }

    fn in_dim(&self) -> usize {
        self.w.rows()
    }

    fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// A classifier head.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(Linear),
    /// `sigmoid(x W1 + b1) W2 + b2`.
    Mlp(Linear, Linear),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Head {
    fn random(rng: &mut impl Rng, kind: HeadKind, dim: usize, out: usize) -> Self {
        match kind {
            HeadKind::Linear => Head::Linear(Linear::random(rng, dim, out, (1.0 / dim as f64).sqrt())),
            HeadKind::Mlp { hidden } => Head::Mlp(
                Linear::random(rng, dim, hidden, (1.0 / dim as f64).sqrt()),
                Linear::random(rng, hidden, out, (1.0 / hidden as f64).sqrt()),
            ),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::Mlp(l1, _) => HeadKind::Mlp { hidden: l1.out_dim() },
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Head::Linear(l) | Head::Mlp(_, l) => l.out_dim(),
        }
    }

    /// Logits for a batch of rows.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Head::Linear(l) => l.forward(x),
            Head::Mlp(l1, l2) => {
                let mut h = l1.forward(x);
                for v in h.data_mut() {
                    *v = sigmoid(*v);
                }
                l2.forward(&h)
            }
        }
    }

    /// Logits for one vector.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&Tensor::row(x.to_vec())).data().to_vec()
    }

    /// Jacobian of the logits at `x`, one row per output.
    pub fn jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Head::Linear(l) => (0..l.out_dim())
                .map(|o| (0..l.in_dim()).map(|i| l.w.get(i, o)).collect())
                .collect(),
            Head::Mlp(l1, l2) => {
                let h = l1.forward(&Tensor::row(x.to_vec()));
                let slope: Vec<f64> = h.data().iter().map(|&a| {
                    let s = sigmoid(a);
                    s * (1.0 - s)
                }).collect();
                (0..l2.out_dim())
                    .map(|o| {
                        (0..l1.in_dim())
                            .map(|i| {
                                (0..l1.out_dim())
                                    .map(|j| l2.w.get(j, o) * slope[j] * l1.w.get(i, j))
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Head::Linear(l) => vec![&l.w, &l.b],
            Head::Mlp(a, b) => vec![&a.w, &a.b, &b.w, &b.b],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Linear(l) => vec![&mut l.w, &mut l.b],
            Head::Mlp(a, b) => vec![&mut a.w, &mut a.b, &mut b.w, &mut b.b],
        }
    }
}

/// All trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub hidden: usize,
    pub n_generators: usize,
    pub gate_in: Linear,
    pub gate_out: Linear,
    pub auth: Head,
    pub gen: Head,
}

/// Output of [`ModelParams::infer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub p_fake: f64,
}

fn prediction_from_logits(l: &[f64]) -> Prediction {
    let p = softmax(&Tensor::row(l.to_vec()));
    Prediction {
        // Ties go to fake.
        label: u8::from(l[1] >= l[0]),
        p_fake: p.data()[1],
    }
}

impl ModelParams {
    /// Seeded initialization. Weights are rounded to `f32` precision so a
    /// freshly initialized model equals its saved file.
    pub fn init(dim: usize, n_generators: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if n_generators < 2 {
            return Err(Error::config("n_generators", "must be at least 2"));
        }
        let hidden = cfg.hidden.unwrap_or(2 * dim);
        if hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if let HeadKind::Mlp { hidden: h } = cfg.auth_head {
            if h == 0 || h == 2 {
                return Err(Error::config("auth_head", "MLP width must be positive and not 2"));
            }
        }
        if let HeadKind::Mlp { hidden: h } = cfg.gen_head {
            if h == 0 || h == n_generators + 1 {
                return Err(Error::config("gen_head", "MLP width must be positive and not K+1"));
            }
        }
        let mut rng = substream(seed, stream::INIT, 0);
        let gate_in = Linear::random(&mut rng, dim, hidden, (2.0 / dim as f64).sqrt());
        let mut gate_out = Linear::random(&mut rng, hidden, 2 * dim, 0.1 * (1.0 / hidden as f64).sqrt());
        gate_out.b = Tensor::filled(1, 2 * dim, cfg.gate_bias_init);
        let auth = Head::random(&mut rng, cfg.auth_head, dim, 2);
        let gen = Head::random(&mut rng, cfg.gen_head, dim, n_generators + 1);
        let mut p = Self {
            dim,
            hidden,
            n_generators,
            gate_in,
            gate_out,
            auth,
            gen,
        };
        p.quantize_f32();
        Ok(p)
    }

    /// Replaces the gate output layer by zero weights and `±8` biases drawn
    /// with density 0.5, so every input gets the same random hard masks.
    pub fn randomize_masks(&mut self, seed: u64) {
        let mut rng = substream(seed, stream::INIT, 1);
        for v in self.gate_out.w.data_mut() {
            *v = 0.0;
        }
        for v in self.gate_out.b.data_mut() {
            *v = if rng.random_bool(0.5) { RANDOM_MASK_LOGIT } else { -RANDOM_MASK_LOGIT };
        }
    }

    /// Weight tensors in file order: gate (W1, b1, W2, b2), auth head, gen head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.gate_in.w, &self.gate_in.b, &self.gate_out.w, &self.gate_out.b];
        v.extend(self.auth.tensors());
        v.extend(self.gen.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.gate_in.w,
            &mut self.gate_in.b,
            &mut self.gate_out.w,
            &mut self.gate_out.b,
        ];
        v.extend(self.auth.tensors_mut());
        v.extend(self.gen.tensors_mut());
        v
    }

    /// Number of leading tensors that belong to the gate.
    pub const GATE_TENSORS: usize = 4;

    /// Rounds every weight to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    fn gate_hidden(&self, z: &Tensor) -> Tensor {
        let mut h = self.gate_in.forward(z);
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
        h
    }

    /// `(p_u, p_s)` for a batch of rows.
    pub fn gate_probs_batch(&self, z: &Tensor) -> (Tensor, Tensor) {
        let mut out = self.gate_out.forward(&self.gate_hidden(z));
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let d = self.dim;
        let mut pu = Vec::with_capacity(z.rows() * d);
        let mut ps = Vec::with_capacity(z.rows() * d);
        for r in 0..out.rows() {
            let row = out.row_slice(r);
            pu.extend_from_slice(&row[..d]);
            ps.extend_from_slice(&row[d..]);
        }
        (
            Tensor::new(z.rows(), d, pu).expect("finite"),
            Tensor::new(z.rows(), d, ps).expect("finite"),
        )
    }

    pub fn gate_probs(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (pu, ps) = self.gate_probs_batch(&Tensor::row(z.to_vec()));
        (pu.data().to_vec(), ps.data().to_vec())
    }

    /// `p_u` only: the first D gate outputs.
    fn universal_probs(&self, z: &Tensor) -> Tensor {
        let h = self.gate_hidden(z);
        let d = self.dim;
        let mut out = vec![0.0; z.rows() * d];
        for r in 0..z.rows() {
            let hr = h.row_slice(r);
            let orow = &mut out[r * d..(r + 1) * d];
            orow.copy_from_slice(&self.gate_out.b.data()[..d]);
            for (j, &hv) in hr.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                let wrow = &self.gate_out.w.row_slice(j)[..d];
                for (o, w) in orow.iter_mut().zip(wrow) {
                    *o += hv * w;
                }
            }
            for o in orow.iter_mut() {
                *o = sigmoid(*o);
            }
        }
        Tensor::new(z.rows(), d, out).expect("finite")
    }

    /// Universal component of each row under `mode`.
    pub fn universal_component(&self, z: &Tensor, mode: MaskMode) -> Tensor {
        let pu = self.universal_probs(z);
        let data = z
            .data()
            .iter()
            .zip(pu.data())
            .map(|(&zv, &p)| match mode {
                MaskMode::Soft => zv * p,
                MaskMode::Hard | MaskMode::Random => if p > 0.5 { zv } else { zv * 0.0 },
            })
            .collect();
        Tensor::new(z.rows(), z.cols(), data).expect("finite")
    }

    /// Real/fake decision from the universal component only.
    pub fn infer(&self, z: &[f64], mode: MaskMode) -> Prediction {
        self.infer_batch(&Tensor::row(z.to_vec()), mode)[0]
    }

    pub fn infer_batch(&self, z: &Tensor, mode: MaskMode) -> Vec<Prediction> {
        let logits = self.auth.forward(&self.universal_component(z, mode));
        (0..logits.rows()).map(|r| prediction_from_logits(logits.row_slice(r))).collect()
    }

    /// Full decomposition of each row.
    pub fn decompose_batch(&self, z: &Tensor, mode: MaskMode) -> Vec<Decomposition> {
        let (pu, ps) = self.gate_probs_batch(z);
        (0..z.rows())
            .map(|r| {
                decompose_with(z.row_slice(r), pu.row_slice(r), ps.row_slice(r), mode)
                    .expect("shapes agree")
            })
            .collect()
    }

    /// Records every weight as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        ModelVars::from_slice(&vars, self)
    }
}

/// Tape handles for one [`Head`].
#[derive(Clone, Debug)]
pub enum HeadVars {
    Linear { w: Var, b: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl HeadVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            HeadVars::Linear { w, b } => {
                let xw = tape.matmul(x, w)?;
                tape.add_row(xw, b)
            }
            HeadVars::Mlp { w1, b1, w2, b2 } => {
                let a = tape.matmul(x, w1)?;
                let a = tape.add_row(a, b1)?;
                let h = tape.sigmoid(a);
                let o = tape.matmul(h, w2)?;
                tape.add_row(o, b2)
            }
        }
    }
}

/// Tape handles for every weight, in the order of [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
    pub gate_w1: Var,
    pub gate_b1: Var,
    pub gate_w2: Var,
    pub gate_b2: Var,
    pub auth: HeadVars,
    pub gen: HeadVars,
    pub dim: usize,
}

impl ModelVars {
    /// Maps handles created from `params.tensors()` back to their roles.
    pub fn from_slice(vars: &[Var], params: &ModelParams) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one handle per tensor");
        let (gate_w1, gate_b1, gate_w2, gate_b2) = (next(), next(), next(), next());
        let mut head = |h: &Head| match h {
            Head::Linear(_) => HeadVars::Linear { w: next(), b: next() },
            Head::Mlp(..) => HeadVars::Mlp { w1: next(), b1: next(), w2: next(), b2: next() },
        };
        let auth = head(&params.auth);
        let gen = head(&params.gen);
        Self {
            all: vars.to_vec(),
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
            auth,
            gen,
            dim: params.dim,
        }
    }

    /// `(p_u, p_s)` as tape nodes.
    pub fn gate(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let a = tape.matmul(z, self.gate_w1)?;
        let a = tape.add_row(a, self.gate_b1)?;
        let h = tape.relu(a);
        let o = tape.matmul(h, self.gate_w2)?;
        let o = tape.add_row(o, self.gate_b2)?;
        let p = tape.sigmoid(o);
        let pu = tape.slice_cols(p, 0, self.dim)?;
        let ps = tape.slice_cols(p, self.dim, self.dim)?;
        Ok((pu, ps))
    }
}

/// Masks and components as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionVars {
    pub p_u: Var,
    pub p_s: Var,
    pub m_u: Var,
    pub m_s: Var,
    pub z_u: Var,
    pub z_s: Var,
    pub z_n: Var,
}

/// Cascaded decomposition on the tape. `frozen` supplies constant masks in
/// place of the ones derived from `p_u`, `p_s`.
pub fn decompose_vars(
    tape: &mut Tape,
    z: Var,
    p_u: Var,
    p_s: Var,
    mode: MaskMode,
    frozen: Option<(&Tensor, &Tensor)>,
) -> Result<DecompositionVars> {
    let (m_u, m_s) = match (frozen, mode) {
        (Some((mu, ms)), _) => (tape.constant(mu.clone()), tape.constant(ms.clone())),
        (None, MaskMode::Soft) => (p_u, p_s),
        (None, MaskMode::Hard | MaskMode::Random) => (tape.ste_threshold(p_u), tape.ste_threshold(p_s)),
    };
    let z_u = tape.mul(z, m_u)?;
    let keep = tape.one_minus(m_u);
    let rest = tape.mul(z, keep)?;
    let z_s = tape.mul(rest, m_s)?;
    let drop_s = tape.one_minus(m_s);
    let z_n = tape.mul(rest, drop_s)?;
    Ok(DecompositionVars {
        p_u,
        p_s,
        m_u,
        m_s,
        z_u,
        z_s,
        z_n,
    })
}

/// Values of one decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub p_u: Vec<f64>,
    pub p_s: Vec<f64>,
    pub m_u: Vec<f64>,
    pub m_s: Vec<f64>,
    pub z_u: Vec<f64>,
    pub z_s: Vec<f64>,
    pub z_n: Vec<f64>,
}

/// Hard-mask decomposition of one vector.
pub fn decompose(z: &[f64], p_u: &[f64], p_s: &[f64]) -> Result<Decomposition> {
    decompose_with(z, p_u, p_s, MaskMode::Hard)
}

pub fn decompose_with(z: &[f64], p_u: &[f64], p_s: &[f64], mode: MaskMode) -> Result<Decomposition> {
    if p_u.len() != z.len() || p_s.len() != z.len() {
        return Err(Error::shape(format!(
            "z has {} channels, p_u {}, p_s {}",
            z.len(),
            p_u.len(),
            p_s.len()
        )));
    }
    let mask = |p: f64| match mode {
        MaskMode::Soft => p,
        MaskMode::Hard | MaskMode::Random => if p > 0.5 { 1.0 } else { 0.0 },
    };
    let m_u: Vec<f64> = p_u.iter().map(|&p| mask(p)).collect();
    let m_s: Vec<f64> = p_s.iter().map(|&p| mask(p)).collect();
    let mut d = Decomposition {
        p_u: p_u.to_vec(),
        p_s: p_s.to_vec(),
        z_u: Vec::with_capacity(z.len()),
        z_s: Vec::with_capacity(z.len()),
        z_n: Vec::with_capacity(z.len()),
        m_u,
        m_s,
    };
    for (i, &zi) in z.iter().enumerate() {
        let rest = zi * (1.0 - d.m_u[i]);
        d.z_u.push(zi * d.m_u[i]);
        d.z_s.push(rest * d.m_s[i]);
        d.z_n.push(rest * (1.0 - d.m_s[i]));
    }
    Ok(d)
}
