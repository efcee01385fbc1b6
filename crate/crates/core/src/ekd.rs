//! Loss terms: posteriors, KL distillation, attention maps and their MSE,
//! hard-label cross-entropy, and the weighted total over all nets.

use crate::error::{Error, Result};
use crate::tensor::{checked_mode, Graph, Scalar, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_KL_WEIGHT: f64 = 1.0;
pub const DEFAULT_ATT_WEIGHT: f64 = 1e-3;

fn check_logits<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [n, m] if m >= 2 => Ok((n, m)),
        ref s => Err(Error::shape(op, format!("expected N×M logits with M ≥ 2, got {s:?}"))),
    }
}

fn row_max_shift<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let m = g.max_axis(x, 1, true)?;
    // the shift cancels analytically, so no gradient needs to flow through it
    let m = g.detach(m);
    let m = g.broadcast(m, &shape)?;
    g.sub(x, m)
}

/// Row-wise softmax of N×M logits.
pub fn softmax<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    check_logits(g, logits, "softmax")?;
    let shape = g.shape(logits).to_vec();
    let z = row_max_shift(g, logits)?;
    let e = g.exp(z)?;
    let s = g.sum_axes(e, &[1], true)?;
    let s = g.broadcast(s, &shape)?;
    g.div(e, s)
}

/// Row-wise log-softmax of N×M logits.
pub fn log_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    check_logits(g, logits, "log_softmax")?;
    let shape = g.shape(logits).to_vec();
    let z = row_max_shift(g, logits)?;
    let e = g.exp(z)?;
    let s = g.sum_axes(e, &[1], true)?;
    let lse = g.log(s)?;
    let lse = g.broadcast(lse, &shape)?;
    g.sub(z, lse)
}

/// Softmax of a plain N×M tensor, outside any graph.
pub fn softmax_posterior<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let p = softmax(&mut g, x)?;
    Ok(g.value(p).clone())
}

/// `(1/N) Σ_n Σ_m p_t·(log p_t − log p_s)` over probability batches. With
/// `teacher_grad = false` the teacher side is a constant.
pub fn kl_distillation<T: Scalar>(g: &mut Graph<T>, p_t: Var, p_s: Var, teacher_grad: bool) -> Result<Var> {
    let (n, _) = check_logits(g, p_t, "kl_distillation")?;
    if g.shape(p_t) != g.shape(p_s) {
        return Err(Error::shape(
            "kl_distillation",
            format!("teacher {:?} vs student {:?}", g.shape(p_t), g.shape(p_s)),
        ));
    }
    let p_t = if teacher_grad { p_t } else { g.detach(p_t) };
    if checked_mode() {
        let floored = g
            .value(p_t)
            .data()
            .iter()
            .zip(g.value(p_s).data())
            .filter(|(t, s)| t.as_f64() > 0.0 && s.as_f64() < PROB_FLOOR)
            .count();
        if floored > 0 {
            eprintln!("kl_distillation: {floored} student probabilities floored at {PROB_FLOOR:e}");
        }
    }
    let ct = g.clamp_min(p_t, PROB_FLOOR)?;
    let lt = g.log(ct)?;
    let cs = g.clamp_min(p_s, PROB_FLOOR)?;
    let ls = g.log(cs)?;
    let d = g.sub(lt, ls)?;
    let prod = g.mul(p_t, d)?;
    let s = g.sum_all(prod)?;
    g.scale(s, 1.0 / n as f64)
}

/// KL distillation computed from logits through log-softmax, which avoids the
/// probability floor entirely.
pub fn kl_from_logits<T: Scalar>(g: &mut Graph<T>, teacher: Var, student: Var, teacher_grad: bool) -> Result<Var> {
    let (n, _) = check_logits(g, teacher, "kl_distillation")?;
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::shape(
            "kl_distillation",
            format!("teacher {:?} vs student {:?}", g.shape(teacher), g.shape(student)),
        ));
    }
    let teacher = if teacher_grad { teacher } else { g.detach(teacher) };
    let lt = log_softmax(g, teacher)?;
    let pt = g.exp(lt)?;
    let ls = log_softmax(g, student)?;
    let d = g.sub(lt, ls)?;
    let prod = g.mul(pt, d)?;
    let s = g.sum_all(prod)?;
    g.scale(s, 1.0 / n as f64)
}

/// `A = Σ_c |F_c|`, N×C×H×W → N×1×H×W.
pub fn attention_map<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    if g.shape(features).len() != 4 || g.shape(features)[1] == 0 {
        return Err(Error::shape(
            "attention_map",
            format!("expected N×C×H×W features, got {:?}", g.shape(features)),
        ));
    }
    let a = g.abs(features)?;
    g.sum_axes(a, &[1], true)
}

/// `(1/N) Σ_n Σ_hw (a_s − a_t)²`: summed over positions, averaged over the batch.
pub fn attention_mse<T: Scalar>(g: &mut Graph<T>, a_s: Var, a_t: Var, teacher_grad: bool) -> Result<Var> {
    if g.shape(a_s) != g.shape(a_t) || g.shape(a_s).is_empty() {
        return Err(Error::shape(
            "attention_mse",
            format!("student {:?} vs teacher {:?}", g.shape(a_s), g.shape(a_t)),
        ));
    }
    let n = g.shape(a_s)[0].max(1);
    let a_t = if teacher_grad { a_t } else { g.detach(a_t) };
    let d = g.sub(a_s, a_t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, 1.0 / n as f64)
}

/// Mean negative log-likelihood of the hard labels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = check_logits(g, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Invalid(format!("label {bad} out of range for {m} classes")));
    }
    let mut mask = Tensor::zeros(vec![n, m]);
    for (i, &y) in labels.iter().enumerate() {
        mask.data_mut()[i * m + y] = T::one();
    }
    let mask = g.constant(mask)?;
    let lp = log_softmax(g, logits)?;
    let picked = g.mul(lp, mask)?;
    let s = g.sum_all(picked)?;
    g.scale(s, -1.0 / n as f64)
}

/// Per-sub-net distillation weights `w_k` (KL) and `α_k` (attention).
#[derive(Clone, Debug, PartialEq)]
pub struct EkdWeights {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl EkdWeights {
    pub fn uniform(k: usize, w: f64, alpha: f64) -> Self {
        EkdWeights {
            w: vec![w; k],
            alpha: vec![alpha; k],
        }
    }

    pub fn zero(k: usize) -> Self {
        Self::uniform(k, 0.0, 0.0)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.w.len() != k || self.alpha.len() != k {
            return Err(Error::Config(format!(
                "need {k} KL and attention weights, got {} and {}",
                self.w.len(),
                self.alpha.len()
            )));
        }
        if self.w.iter().chain(&self.alpha).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("EKD weights must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Decomposed total loss of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct EkdLossReport {
    pub ce_full: f64,
    pub ce_sub: Vec<f64>,
    pub kl_sub: Vec<f64>,
    pub att_sub: Vec<f64>,
    pub total: f64,
}

/// How the parts are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Combination {
    /// Give every sub-net CE term weight 1 instead of 1/K.
    pub unnormalized_subnet_ce: bool,
}

impl Combination {
    fn ce_scale(self, k: usize) -> f64 {
        if self.unnormalized_subnet_ce {
            1.0
        } else {
            1.0 / k as f64
        }
    }
}

/// `L_0 + (1/K)Σ L_k + (1/K)Σ w_k·KL_k + (1/K)Σ α_k·MSE_k`.
pub fn total_loss(
    ce_full: f64,
    ce_sub: &[f64],
    kl_sub: &[f64],
    att_sub: &[f64],
    weights: &EkdWeights,
    how: Combination,
) -> Result<EkdLossReport> {
    let k = ce_sub.len();
    weights.validate(k)?;
    if kl_sub.len() != k || att_sub.len() != k {
        return Err(Error::Invalid(format!(
            "{k} sub-net CE terms but {} KL and {} attention terms",
            kl_sub.len(),
            att_sub.len()
        )));
    }
    let mut total = ce_full;
    if k > 0 {
        let inv = 1.0 / k as f64;
        total += how.ce_scale(k) * ce_sub.iter().sum::<f64>();
        total += inv * kl_sub.iter().zip(&weights.w).map(|(l, w)| w * l).sum::<f64>();
        total += inv * att_sub.iter().zip(&weights.alpha).map(|(l, a)| a * l).sum::<f64>();
    }
    Ok(EkdLossReport {
        ce_full,
        ce_sub: ce_sub.to_vec(),
        kl_sub: kl_sub.to_vec(),
        att_sub: att_sub.to_vec(),
        total,
    })
}

impl EkdLossReport {
    pub fn k(&self) -> usize {
        self.ce_sub.len()
    }

    /// The combination recomputed from the stored parts.
    pub fn recombine(&self, weights: &EkdWeights, how: Combination) -> Result<f64> {
        Ok(total_loss(self.ce_full, &self.ce_sub, &self.kl_sub, &self.att_sub, weights, how)?.total)
    }
}

/// Graph-side terms of one step, before combination.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub ce_full: Var,
    pub ce_sub: Vec<Var>,
    pub kl_sub: Vec<Var>,
    pub att_sub: Vec<Var>,
}

impl LossTerms {
    /// Builds the total as a graph node.
    pub fn total<T: Scalar>(&self, g: &mut Graph<T>, weights: &EkdWeights, how: Combination) -> Result<Var> {
        let k = self.ce_sub.len();
        weights.validate(k)?;
        let mut total = self.ce_full;
        if k == 0 {
            return Ok(total);
        }
        let inv = 1.0 / k as f64;
        for &l in &self.ce_sub {
            let t = g.scale(l, how.ce_scale(k))?;
            total = g.add(total, t)?;
        }
        for (&l, &w) in self.kl_sub.iter().zip(&weights.w) {
            if w != 0.0 {
                let t = g.scale(l, w * inv)?;
                total = g.add(total, t)?;
            }
        }
        for (&l, &a) in self.att_sub.iter().zip(&weights.alpha) {
            if a != 0.0 {
                let t = g.scale(l, a * inv)?;
                total = g.add(total, t)?;
            }
        }
        Ok(total)
    }

    /// Reads the scalar values of every term.
    pub fn report<T: Scalar>(&self, g: &Graph<T>, weights: &EkdWeights, how: Combination) -> Result<EkdLossReport> {
        let val = |v: &Var| g.value(*v).item().map(|x| x.as_f64());
        let ce_sub = self.ce_sub.iter().map(val).collect::<Result<Vec<_>>>()?;
        let kl_sub = self.kl_sub.iter().map(val).collect::<Result<Vec<_>>>()?;
        let att_sub = self.att_sub.iter().map(val).collect::<Result<Vec<_>>>()?;
        total_loss(val(&self.ce_full)?, &ce_sub, &kl_sub, &att_sub, weights, how)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(shape: &[usize], data: &[f64]) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(shape.to_vec(), data).unwrap()).unwrap();
        (g, x)
    }

    #[test]
    fn softmax_examples() {
        let (mut g, x) = graph_with(&[3, 3], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1000.0, 0.0, 0.0]);
        let p = softmax(&mut g, x).unwrap();
        let v = g.value(p).data().to_vec();
        for q in &v[..3] {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
        let e = std::f64::consts::E;
        assert!((v[3] - e / (e + 2.0)).abs() < 1e-12);
        assert_eq!(v[6], 1.0);
        assert!(v.iter().all(|q| q.is_finite()));

        let (mut g, x) = graph_with(&[1, 2], &[1.0, 0.0]);
        let p = softmax(&mut g, x).unwrap();
        assert!((g.value(p).data()[0] - 0.73106).abs() < 1e-5);
        assert!((g.value(p).data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let t = g
            .constant(Tensor::from_vec(vec![0.9, 0.1]).reshape(vec![1, 2]).unwrap())
            .unwrap();
        let s = g
            .constant(Tensor::from_vec(vec![0.5, 0.5]).reshape(vec![1, 2]).unwrap())
            .unwrap();
        let kl = kl_distillation(&mut g, t, s, false).unwrap();
        let want = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((g.value(kl).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.368064).abs() < 1e-6);
        let same = kl_distillation(&mut g, t, t, false).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn kl_zero_teacher_entries_contribute_nothing() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let s = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
        let kl = kl_distillation(&mut g, t, s, false).unwrap();
        assert!((g.value(kl).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        let (mut g, f) = graph_with(&[1, 2, 2, 2], &[1.0, -1.0, 2.0, 0.0, 0.0, 3.0, -2.0, 1.0]);
        let a = attention_map(&mut g, f).unwrap();
        assert_eq!(g.shape(a), &[1, 1, 2, 2]);
        assert_eq!(g.value(a).data(), &[1.0, 4.0, 4.0, 1.0]);

        let (mut g, a) = graph_with(&[2, 1, 4, 4], &[0.5; 32]);
        let b = g.add_scalar(a, 1.0).unwrap();
        let mse = attention_mse(&mut g, b, a, false).unwrap();
        assert_eq!(g.value(mse).item().unwrap(), 16.0);
        let c = g.add_scalar(a, 2.0).unwrap();
        let mse2 = attention_mse(&mut g, c, a, false).unwrap();
        assert_eq!(g.value(mse2).item().unwrap(), 64.0);
        assert!(attention_mse(&mut g, a, mse, false).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (mut g, x) = graph_with(&[2, 10], &[0.0; 20]);
        let ce = cross_entropy(&mut g, x, &[3, 7]).unwrap();
        assert!((g.value(ce).item().unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(cross_entropy(&mut g, x, &[3, 10]).is_err());
        assert!(cross_entropy(&mut g, x, &[3]).is_err());

        let (mut g, x) = graph_with(&[1, 2], &[0.0, -1e4]);
        let ce = cross_entropy(&mut g, x, &[0]).unwrap();
        assert_eq!(g.value(ce).item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = EkdWeights {
            w: vec![1.0],
            alpha: vec![0.1],
        };
        let r = total_loss(1.0, &[2.0], &[0.5], &[10.0], &w, Combination::default()).unwrap();
        assert!((r.total - 4.5).abs() < 1e-12);
        let r = total_loss(1.0, &[], &[], &[], &EkdWeights::zero(0), Combination::default()).unwrap();
        assert_eq!(r.total, 1.0);
        let r = total_loss(
            1.0,
            &[2.0],
            &[0.5],
            &[10.0],
            &EkdWeights::zero(1),
            Combination::default(),
        )
        .unwrap();
        assert_eq!(r.total, 3.0);
        assert!(total_loss(
            1.0,
            &[2.0],
            &[0.5],
            &[10.0],
            &EkdWeights::zero(2),
            Combination::default()
        )
        .is_err());
        let unnorm = Combination {
            unnormalized_subnet_ce: true,
        };
        let r = total_loss(1.0, &[2.0, 4.0], &[0.0; 2], &[0.0; 2], &EkdWeights::zero(2), unnorm).unwrap();
        assert_eq!(r.total, 7.0);
    }

    #[test]
    fn weights_are_validated() {
        assert!(EkdWeights {
            w: vec![-1.0],
            alpha: vec![0.0]
        }
        .validate(1)
        .is_err());
        assert!(EkdWeights::uniform(2, 1.0, 1e-3).validate(2).is_ok());
    }
}
