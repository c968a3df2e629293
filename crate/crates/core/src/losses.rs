//! Loss terms of the decomposition objective and the first-order
//! purification analysis.
//!
//! Batch losses are means over rows of the per-sample quantity, so their
//! scale does not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Head, HeadVars};

/// Coefficients of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Sufficiency (both heads).
    pub alpha: f64,
    /// Purification.
    pub beta: f64,
    /// Alignment.
    pub gamma: f64,
    /// Sparsity.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(&format!("weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub suff_auth: f64,
    pub suff_gen: f64,
    pub puri: f64,
    pub align: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_COLUMNS: &'static str = "cls,suff_auth,suff_gen,puri,align,sparse,total";

    /// Fills `total` from the components.
    pub fn weighted(
        cls: f64,
        suff_auth: f64,
        suff_gen: f64,
        puri: f64,
        align: f64,
        sparse: f64,
        w: &LossWeights,
    ) -> Self {
        Self {
            cls,
            suff_auth,
            suff_gen,
            puri,
            align,
            sparse,
            total: cls + w.alpha * (suff_auth + suff_gen) + w.beta * puri + w.gamma * align + w.lambda * sparse,
        }
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.cls, self.suff_auth, self.suff_gen, self.puri, self.align, self.sparse, self.total
        )
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.cls += s * other.cls;
        self.suff_auth += s * other.suff_auth;
        self.suff_gen += s * other.suff_gen;
        self.puri += s * other.puri;
        self.align += s * other.align;
        self.sparse += s * other.sparse;
        self.total += s * other.total;
    }
}

/// `(‖p_u‖₁ + ‖p_s‖₁) / D`, averaged over rows.
pub fn sparsity_loss(tape: &mut Tape, p_u: Var, p_s: Var) -> Result<Var> {
    let (rows, d) = tape.value(p_u).shape();
    if tape.value(p_s).shape() != (rows, d) {
        return Err(Error::shape("p_u and p_s differ in shape"));
    }
    let su = tape.sum(p_u);
    let ss = tape.sum(p_s);
    let s = tape.add(su, ss)?;
    Ok(tape.scale(s, 1.0 / (rows * d) as f64))
}

/// `KL(softmax(student) ‖ sg(softmax(teacher)))`, averaged over rows.
pub fn sufficiency_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let t = tape.stop_gradient(teacher);
    tape.kl_div(student, t)
}

/// `z_u + z_donor ⊙ (1 − m_u_donor)`.
pub fn make_hybrid(tape: &mut Tape, z_u: Var, z_donor: Var, m_u_donor: Var) -> Result<Var> {
    let keep = tape.one_minus(m_u_donor);
    let nuisance = tape.mul(z_donor, keep)?;
    tape.add(z_u, nuisance)
}

/// `‖f_u(z_u) − f_u(z_hybrid)‖²` over logits, averaged over rows.
pub fn purification_loss(tape: &mut Tape, head: &HeadVars, z_u: Var, z_hybrid: Var) -> Result<Var> {
    let rows = tape.value(z_u).rows();
    let a = head.forward(tape, z_u)?;
    let b = head.forward(tape, z_hybrid)?;
    let d = tape.sub(a, b)?;
    let sq = tape.l2_norm_sq(d);
    Ok(tape.scale(sq, 1.0 / rows as f64))
}

/// Row groups for centroid alignment: fake rows keyed by generator id, or
/// every row keyed by generator id (real domain included) when
/// `fake_only` is false. Groups are returned in ascending id order.
pub fn alignment_groups(gen_ids: &[u16], labels: &[u8], fake_only: bool) -> Vec<(u16, Vec<usize>)> {
    let mut groups: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
    for (i, (&g, &y)) in gen_ids.iter().zip(labels).enumerate() {
        if fake_only && y == 0 {
            continue;
        }
        groups.entry(g).or_default().push(i);
    }
    groups.into_iter().collect()
}

/// `(1/K) Σ_k ‖c_k − c_global‖²` with `c_k` the mean of `z_u` over group
/// `k` and `c_global` either the mean of the `c_k` or a fixed `target`.
/// No groups gives a constant zero.
pub fn alignment_loss(
    tape: &mut Tape,
    z_u: Var,
    groups: &[(u16, Vec<usize>)],
    target: Option<&[f64]>,
) -> Result<Var> {
    let (rows, d) = tape.value(z_u).shape();
    let k = groups.len();
    if k == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    // A: k x rows averaging matrix; centroids = A z_u.
    let mut a = vec![0.0; k * rows];
    for (gi, (_, idx)) in groups.iter().enumerate() {
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(format!("group row {i} of {rows}")));
            }
            a[gi * rows + i] = w;
        }
    }
    let diff = match target {
        None => {
            // (I − J/k) A: subtracts the mean centroid in the same product.
            let mut t = a.clone();
            for c in 0..rows {
                let mean: f64 = (0..k).map(|g| a[g * rows + c]).sum::<f64>() / k as f64;
                for g in 0..k {
                    t[g * rows + c] -= mean;
                }
            }
            let tv = tape.constant(Tensor::new(k, rows, t)?);
            tape.matmul(tv, z_u)?
        }
        Some(target) => {
            if target.len() != d {
                return Err(Error::shape("alignment target has the wrong length"));
            }
            let av = tape.constant(Tensor::new(k, rows, a)?);
            let c = tape.matmul(av, z_u)?;
            let rep: Vec<f64> = (0..k).flat_map(|_| target.iter().copied()).collect();
            let tv = tape.constant(Tensor::new(k, d, rep)?);
            tape.sub(c, tv)?
        }
    };
    let sq = tape.l2_norm_sq(diff);
    Ok(tape.scale(sq, 1.0 / k as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|½ L_puri(z_u, z_u + tδ) − ½ ‖J(z_u)(tδ)‖²|`, the gap between the
/// purification loss and its first-order form. Zero for linear heads.
pub fn taylor_residual(head: &Head, z_u: &[f64], delta: &[f64], t: f64) -> Result<f64> {
    if z_u.len() != delta.len() {
        return Err(Error::shape("z_u and delta differ in length"));
    }
    if t.is_nan() || t <= 0.0 {
        return Err(Error::invalid("scale t must be positive"));
    }
    let shifted: Vec<f64> = z_u.iter().zip(delta).map(|(z, d)| z + t * d).collect();
    let loss = sq_dist(&head.logits(z_u), &head.logits(&shifted));
    let first_order: f64 = head
        .jacobian(z_u)
        .iter()
        .map(|row| {
            let p: f64 = row.iter().zip(delta).map(|(j, d)| j * t * d).sum();
            p * p
        })
        .sum();
    Ok((0.5 * loss - 0.5 * first_order).abs())
}

/// `‖J δ‖ / (‖J‖_F ‖δ‖)` at `z_u`; zero when `δ = 0`.
pub fn gradient_projection(head: &Head, z_u: &[f64], delta: &[f64]) -> f64 {
    let dn = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    if dn == 0.0 {
        return 0.0;
    }
    let j = head.jacobian(z_u);
    let jf = j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if jf == 0.0 {
        return 0.0;
    }
    let jd = j
        .iter()
        .map(|row| row.iter().zip(delta).map(|(a, b)| a * b).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    jd / (jf * dn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig, ModelParams};

    fn scalar(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn sparsity_examples() {
        let cases = [(1.0, 1.0, 2.0), (0.0, 0.0, 0.0), (0.5, 0.0, 0.5)];
        for (u, s, want) in cases {
            let mut t = Tape::new();
            let pu = t.leaf(Tensor::filled(1, 8, u));
            let ps = t.leaf(Tensor::filled(1, 8, s));
            let l = sparsity_loss(&mut t, pu, ps).unwrap();
            assert_eq!(scalar(&t, l), want);
        }
    }

    #[test]
    fn sufficiency_examples_and_teacher_gradient() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::row(vec![0.0, 0.0]));
        let q = t.leaf(Tensor::row(vec![3f64.ln(), 0.0]));
        let l = sufficiency_loss(&mut t, s, q).unwrap();
        assert!((scalar(&t, l) - (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln())).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert!(g.get(q).is_none());
        assert!(g.get(s).is_some());

        let mut t = Tape::new();
        let s = t.leaf(Tensor::row(vec![0.3, -1.0, 2.0]));
        let l = sufficiency_loss(&mut t, s, s).unwrap();
        assert!(scalar(&t, l).abs() < 1e-15);
    }

    #[test]
    fn hybrid_examples() {
        let mut t = Tape::new();
        let zu = t.constant(Tensor::row(vec![1.0, 0.0, 2.0]));
        let donor = t.constant(Tensor::row(vec![5.0, 6.0, 7.0]));
        let ones = t.constant(Tensor::filled(1, 3, 1.0));
        let h = make_hybrid(&mut t, zu, donor, ones).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0, 2.0]);
        let zero = t.constant(Tensor::zeros(1, 3));
        let h = make_hybrid(&mut t, zu, zero, zero).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0, 2.0]);
    }

    // Channels selected for z_u never receive donor content when both
    // samples share a mask: enumerate every mask on 4 channels.
    #[test]
    fn shared_mask_hybrid_keeps_supports_apart() {
        for bits in 0u32..16 {
            let m: Vec<f64> = (0..4).map(|i| f64::from((bits >> i) & 1)).collect();
            let z = [1.0, 2.0, 3.0, 4.0];
            let donor = [10.0, 20.0, 30.0, 40.0];
            let mut t = Tape::new();
            let zu = t.constant(Tensor::row(z.iter().zip(&m).map(|(a, b)| a * b).collect()));
            let dv = t.constant(Tensor::row(donor.to_vec()));
            let mv = t.constant(Tensor::row(m.clone()));
            let h = make_hybrid(&mut t, zu, dv, mv).unwrap();
            for i in 0..4 {
                let want = if m[i] == 1.0 { z[i] } else { donor[i] };
                assert_eq!(t.value(h).data()[i], want);
            }
        }
    }

    fn linear_params() -> ModelParams {
        ModelParams::init(5, 2, &ModelConfig::default(), 1).unwrap()
    }

    #[test]
    fn purification_linear_closed_form() {
        let p = linear_params();
        let mut t = Tape::new();
        let vars = p.bind(&mut t);
        let zu_vals = vec![0.5, 0.0, -0.2, 0.0, 1.0];
        let delta = vec![0.0, 0.3, 0.0, -0.7, 0.0];
        let zu = t.constant(Tensor::row(zu_vals.clone()));
        let hv = t.constant(Tensor::row(zu_vals.iter().zip(&delta).map(|(a, b)| a + b).collect()));
        let l = purification_loss(&mut t, &vars.auth, zu, hv).unwrap();
        let j = p.auth.jacobian(&zu_vals);
        let want: f64 = j
            .iter()
            .map(|row| row.iter().zip(&delta).map(|(w, d)| w * d).sum::<f64>().powi(2))
            .sum();
        assert!((scalar(&t, l) - want).abs() < 1e-12);

        let same = purification_loss(&mut t, &vars.auth, zu, zu).unwrap();
        assert_eq!(scalar(&t, same), 0.0);
    }

    #[test]
    fn alignment_examples() {
        let mut t = Tape::new();
        let v = [1.0, -2.0, 0.5];
        let zu = t.leaf(Tensor::from_rows(&[v.to_vec(), v.iter().map(|x| -x).collect(), vec![9.0; 3]]).unwrap());
        let groups = alignment_groups(&[1, 2, 0], &[1, 1, 0], true);
        assert_eq!(groups.len(), 2);
        let l = alignment_loss(&mut t, zu, &groups, None).unwrap();
        assert!((scalar(&t, l) - 5.25).abs() < 1e-12);

        let single = alignment_groups(&[3, 3, 0], &[1, 1, 0], true);
        let l = alignment_loss(&mut t, zu, &single, None).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let none = alignment_groups(&[0, 0, 0], &[0, 0, 0], true);
        let l = alignment_loss(&mut t, zu, &none, None).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let all = alignment_groups(&[1, 2, 0], &[1, 1, 0], false);
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::weighted(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, &LossWeights::default());
        assert_eq!(b.total, 21.0);
        let z = LossBreakdown::weighted(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &LossWeights::default());
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn taylor_residual_linear_is_zero() {
        let p = linear_params();
        let zu = [0.3, -0.2, 0.0, 0.9, 0.1];
        let delta = [0.5, 1.0, -0.4, 0.0, 0.2];
        for t in [1.0, 0.1] {
            assert!(taylor_residual(&p.auth, &zu, &delta, t).unwrap() < 1e-10);
        }
        assert_eq!(taylor_residual(&p.auth, &zu, &[0.0; 5], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn taylor_residual_mlp_shrinks_superlinearly() {
        let cfg = ModelConfig { auth_head: HeadKind::Mlp { hidden: 8 }, ..Default::default() };
        let p = ModelParams::init(5, 2, &cfg, 3).unwrap();
        let zu = [0.3, -0.2, 0.0, 0.9, 0.1];
        let delta = [0.5, 1.0, -0.4, 0.0, 0.2];
        for t in [1e-1, 1e-2] {
            let r = taylor_residual(&p.auth, &zu, &delta, t).unwrap();
            let r2 = taylor_residual(&p.auth, &zu, &delta, t / 2.0).unwrap();
            assert!(r2 / r <= 0.30, "t={t}: {r2} / {r}");
        }
    }

    #[test]
    fn projection_of_zero_delta() {
        let p = linear_params();
        assert_eq!(gradient_projection(&p.auth, &[1.0; 5], &[0.0; 5]), 0.0);
    }
}
