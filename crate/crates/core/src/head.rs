//! The two-branch counting head shared by both streams.
//!
//! One linear branch predicts a count per repetition class, the other a
//! softmax distribution over those classes; the stream's count is their
//! expectation. The head runs in `f64` so its gradients can be checked
//! tightly against finite differences.

use rand::Rng;
use repcount_nn::{Init, Module, Param, ParamVisitor};
use serde::{Deserialize, Serialize};

use crate::error::{argument, domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Unsupervised repetition classes kept apart by the cosine diversity term.
    Diversity,
    /// Repetition classes tied to action labels through cross-entropy.
    ActionClassCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub supervision: Supervision,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::sight()
    }
}

impl HeadConfig {
    pub fn sight() -> Self {
        Self {
            feature_dim: 512,
            num_classes: 41,
            lambda1: 10.0,
            lambda2: 10.0,
            supervision: Supervision::Diversity,
        }
    }

    pub fn sound() -> Self {
        Self {
            num_classes: 43,
            ..Self::sight()
        }
    }

    /// Sight head tuned for the per-repetition-boundary dataset.
    pub fn sight_ucfrep() -> Self {
        Self {
            num_classes: 24,
            ..Self::sight()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(argument("head needs feature_dim >= 1 and num_classes >= 1"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(argument("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense64 {
    inputs: usize,
    outputs: usize,
    weight: Param<f64>,
    bias: Param<f64>,
}

impl Dense64 {
    fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(init.sample(inputs * outputs, inputs, rng)),
            bias: Param::zeros(outputs),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .value
            .chunks(self.inputs)
            .zip(&self.bias.value)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn backward(&mut self, x: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            self.bias.grad[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                self.weight.grad[row + i] += g * x[i];
                grad_in[i] += g * self.weight.value[row + i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub per_class_counts: Vec<f64>,
    pub class_dist: Vec<f64>,
    /// Expected count before the stream clamps it.
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingHead {
    pub config: HeadConfig,
    count_branch: Dense64,
    class_branch: Dense64,
}

/// Small symmetric init for both branches.
pub const HEAD_INIT: Init = Init::Uniform { gain: 0.1 };

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl CountingHead {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            count_branch: Dense64::new(config.feature_dim, config.num_classes, init, rng),
            class_branch: Dense64::new(config.feature_dim, config.num_classes, init, rng),
        })
    }

    /// Builds a head from explicit branch weights, each row-major `[P, D]`.
    pub fn from_weights(
        config: HeadConfig,
        count_weight: Vec<f64>,
        count_bias: Vec<f64>,
        class_weight: Vec<f64>,
        class_bias: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.num_classes, config.feature_dim);
        if count_weight.len() != p * d || class_weight.len() != p * d || count_bias.len() != p || class_bias.len() != p {
            return Err(argument("head weight shapes do not match the config"));
        }
        let dense = |w, b| Dense64 {
            inputs: d,
            outputs: p,
            weight: Param::new(w),
            bias: Param::new(b),
        };
        Ok(Self {
            config,
            count_branch: dense(count_weight, count_bias),
            class_branch: dense(class_weight, class_bias),
        })
    }

    pub fn forward(&self, feature: &[f64]) -> Result<HeadOutput> {
        if feature.len() != self.config.feature_dim {
            return Err(argument(format!(
                "feature has {} dims, head expects {}",
                feature.len(),
                self.config.feature_dim
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(domain("non-finite feature"));
        }
        let per_class_counts = self.count_branch.forward(feature);
        let class_dist = softmax(&self.class_branch.forward(feature));
        let count = per_class_counts.iter().zip(&class_dist).map(|(c, t)| c * t).sum();
        Ok(HeadOutput {
            per_class_counts,
            class_dist,
            count,
        })
    }

    /// Backpropagates `dL/dC` and `dL/dT` for one sample, accumulating into
    /// the head parameters. Returns `dL/dfeature`.
    pub fn backward(&mut self, feature: &[f64], out: &HeadOutput, grad_count: f64, grad_dist: &[f64]) -> Vec<f64> {
        let t = &out.class_dist;
        let grad_counts: Vec<f64> = t.iter().map(|tk| grad_count * tk).collect();
        let grad_t: Vec<f64> = grad_dist
            .iter()
            .zip(&out.per_class_counts)
            .map(|(g, c)| g + grad_count * c)
            .collect();
        let inner: f64 = grad_t.iter().zip(t).map(|(g, tk)| g * tk).sum();
        let grad_logits: Vec<f64> = t.iter().zip(&grad_t).map(|(tk, g)| tk * (g - inner)).collect();
        let mut grad_feature = vec![0.0; feature.len()];
        self.count_branch.backward(feature, &grad_counts, &mut grad_feature);
        self.class_branch.backward(feature, &grad_logits, &mut grad_feature);
        grad_feature
    }
}

impl Module for CountingHead {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        v.visit_f64(&mut self.count_branch.weight);
        v.visit_f64(&mut self.count_branch.bias);
        v.visit_f64(&mut self.class_branch.weight);
        v.visit_f64(&mut self.class_branch.bias);
    }
}

fn check_dists(dists: &[Vec<f64>]) -> Result<usize> {
    let p = dists.first().map(Vec::len).ok_or_else(|| argument("empty batch"))?;
    if p == 0 || dists.iter().any(|d| d.len() != p) {
        return Err(argument("class distributions must share a non-zero length"));
    }
    if dists.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(domain("class distributions must be finite and non-negative"));
    }
    Ok(p)
}

/// Sum over class-unit pairs of the cosine similarity between their
/// activation columns across the batch, with its gradient w.r.t. every entry.
pub fn diversity_loss_grad(dists: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let p = check_dists(dists)?;
    let n = dists.len();
    let col = |q: usize| dists.iter().map(move |row| row[q]);
    let norms: Vec<f64> = (0..p).map(|q| col(q).map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut grad = vec![vec![0.0; p]; n];
    let mut total = 0.0;
    for q in 0..p {
        for j in q + 1..p {
            let (a, b) = (norms[q], norms[j]);
            if a == 0.0 || b == 0.0 {
                continue;
            }
            let d: f64 = col(q).zip(col(j)).map(|(x, y)| x * y).sum();
            let cos = d / (a * b);
            total += cos;
            for row in 0..n {
                let (x, y) = (dists[row][q], dists[row][j]);
                grad[row][q] += y / (a * b) - cos * x / (a * a);
                grad[row][j] += x / (a * b) - cos * y / (b * b);
            }
        }
    }
    Ok((total, grad))
}

pub fn diversity_loss(dists: &[Vec<f64>]) -> Result<f64> {
    Ok(diversity_loss_grad(dists)?.0)
}

/// Mean cross-entropy of the class distributions against action labels.
pub fn action_class_ce_loss(dists: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(action_class_ce_grad(dists, labels)?.0)
}

fn action_class_ce_grad(dists: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let p = check_dists(dists)?;
    if labels.len() != dists.len() {
        return Err(argument("one action label per sample is required"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= p) {
        return Err(argument(format!("action label {bad} outside [0, {p})")));
    }
    let n = dists.len() as f64;
    let mut grad = vec![vec![0.0; p]; dists.len()];
    let mut total = 0.0;
    for (i, (row, &l)) in dists.iter().zip(labels).enumerate() {
        let t = row[l].max(f64::MIN_POSITIVE);
        total -= t.ln();
        grad[i][l] = -1.0 / (n * t);
    }
    Ok((total / n, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub squared: f64,
    pub relative: f64,
    /// Diversity (or action cross-entropy) term before weighting.
    pub regularizer: f64,
}

pub struct LossGrad {
    pub loss: LossBreakdown,
    pub grad_counts: Vec<f64>,
    pub grad_dists: Vec<Vec<f64>>,
}

/// `(1/N) Σ [(C-l)² + λ1 |C-l|/l] + λ2 · R`, where `R` is the batch diversity
/// or the mean action cross-entropy.
pub fn counting_loss_grad(
    counts: &[f64],
    labels: &[f64],
    dists: &[Vec<f64>],
    config: &HeadConfig,
    action_labels: Option<&[usize]>,
) -> Result<LossGrad> {
    let n = counts.len();
    if n == 0 || labels.len() != n || dists.len() != n {
        return Err(argument("counts, labels and distributions must have equal non-zero length"));
    }
    if let Some(bad) = labels.iter().find(|l| !(**l > 0.0)) {
        return Err(domain(format!("label {bad} is not positive")));
    }
    let nf = n as f64;
    let mut loss = LossBreakdown::default();
    let mut grad_counts = Vec::with_capacity(n);
    for (&c, &l) in counts.iter().zip(labels) {
        let e = c - l;
        loss.squared += e * e / nf;
        loss.relative += e.abs() / l / nf;
        grad_counts.push((2.0 * e + config.lambda1 * e.signum() / l) / nf);
    }
    let (reg, mut grad_dists) = match config.supervision {
        Supervision::Diversity => diversity_loss_grad(dists)?,
        Supervision::ActionClassCe => {
            let labels = action_labels.ok_or_else(|| argument("action-class supervision needs action labels"))?;
            action_class_ce_grad(dists, labels)?
        }
    };
    loss.regularizer = reg;
    grad_dists.iter_mut().flatten().for_each(|g| *g *= config.lambda2);
    loss.total = loss.squared + config.lambda1 * loss.relative + config.lambda2 * reg;
    Ok(LossGrad {
        loss,
        grad_counts,
        grad_dists,
    })
}

pub fn counting_loss(
    counts: &[f64],
    labels: &[f64],
    dists: &[Vec<f64>],
    config: &HeadConfig,
    action_labels: Option<&[usize]>,
) -> Result<f64> {
    Ok(counting_loss_grad(counts, labels, dists, config, action_labels)?.loss.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: usize, d: usize, l1: f64, l2: f64) -> HeadConfig {
        HeadConfig {
            feature_dim: d,
            num_classes: p,
            lambda1: l1,
            lambda2: l2,
            supervision: Supervision::Diversity,
        }
    }

    /// Head whose count branch outputs `counts` and class branch `logits`
    /// for the feature `[1.0]`.
    fn fixed_head(counts: &[f64], logits: &[f64]) -> CountingHead {
        let p = counts.len();
        CountingHead::from_weights(cfg(p, 1, 0.0, 0.0), counts.to_vec(), vec![0.0; p], logits.to_vec(), vec![0.0; p]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let out = fixed_head(&[2.0, 4.0], &[0.3, 0.3]).forward(&[1.0]).unwrap();
        assert!((out.class_dist[0] - 0.5).abs() < 1e-12);
        assert!((out.count - 3.0).abs() < 1e-12);

        let out = fixed_head(&[7.5], &[-3.0]).forward(&[1.0]).unwrap();
        assert_eq!(out.class_dist, vec![1.0]);
        assert_eq!(out.count, 7.5);

        let out = fixed_head(&[1.0, 2.0, 3.0], &[0.0, 0.0, 60.0]).forward(&[1.0]).unwrap();
        assert!((out.count - 3.0).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let head = fixed_head(&[1.0], &[0.0]);
        assert!(matches!(head.forward(&[1.0, 2.0]), Err(crate::Error::Argument(_))));
        assert!(matches!(head.forward(&[f64::NAN]), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        assert!((diversity_loss(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap() - 1.0).abs() < 1e-12);
        let u = vec![1.0 / 3.0; 3];
        assert!((diversity_loss(&[u.clone(), u.clone(), u]).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(diversity_loss(&[vec![-0.1, 1.1]]), Err(crate::Error::Domain(_))));
        // zero-norm column contributes nothing
        assert_eq!(diversity_loss(&[vec![1.0, 0.0, 0.0]]).unwrap(), 0.0);
    }

    /// Scalar reference: the loss written out for one sample and P = 2.
    fn reference_single(c: f64, l: f64, t: [f64; 2], l1: f64, l2: f64) -> f64 {
        let cos = if t[0] > 0.0 && t[1] > 0.0 { 1.0 } else { 0.0 };
        (c - l).powi(2) + l1 * (c - l).abs() / l + l2 * cos
    }

    #[test]
    fn counting_loss_examples() {
        let d = vec![vec![0.5, 0.5]];
        assert_eq!(counting_loss(&[4.0], &[4.0], &d, &cfg(2, 1, 0.0, 0.0), None).unwrap(), 0.0);
        assert!((counting_loss(&[5.0], &[4.0], &d, &cfg(2, 1, 10.0, 0.0), None).unwrap() - 3.5).abs() < 1e-12);
        let v = counting_loss(&[5.0], &[4.0], &d, &cfg(2, 1, 10.0, 10.0), None).unwrap();
        assert!((v - reference_single(5.0, 4.0, [0.5, 0.5], 10.0, 10.0)).abs() < 1e-12);
        assert!((v - 13.5).abs() < 1e-12);
        assert!(matches!(
            counting_loss(&[5.0], &[0.0], &d, &cfg(2, 1, 1.0, 1.0), None),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn ce_examples() {
        assert_eq!(action_class_ce_loss(&[vec![1.0, 0.0]], &[0]).unwrap(), 0.0);
        assert!((action_class_ce_loss(&[vec![0.5, 0.5]], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((action_class_ce_loss(&[vec![0.25, 0.75]], &[0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(action_class_ce_loss(&[vec![0.5, 0.5]], &[2]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn ce_supervision_replaces_diversity() {
        let mut c = cfg(2, 1, 0.0, 2.0);
        c.supervision = Supervision::ActionClassCe;
        let d = vec![vec![0.5, 0.5]];
        let v = counting_loss(&[4.0], &[4.0], &d, &c, Some(&[0])).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(counting_loss(&[4.0], &[4.0], &d, &c, None).is_err());
    }

    fn loss_of(head: &CountingHead, feats: &[Vec<f64>], labels: &[f64]) -> f64 {
        let outs: Vec<_> = feats.iter().map(|f| head.forward(f).unwrap()).collect();
        let counts: Vec<f64> = outs.iter().map(|o| o.count).collect();
        let dists: Vec<Vec<f64>> = outs.iter().map(|o| o.class_dist.clone()).collect();
        counting_loss(&counts, labels, &dists, &head.config, None).unwrap()
    }

    struct Flat<'a>(&'a mut Vec<f64>, bool);
    impl ParamVisitor for Flat<'_> {
        fn visit_f32(&mut self, _: &mut Param<f32>) {}
        fn visit_f64(&mut self, p: &mut Param<f64>) {
            if self.1 {
                self.0.extend(&p.grad);
            } else {
                self.0.extend(&p.value);
            }
        }
    }

    fn nudge(head: &mut CountingHead, idx: usize, delta: f64) {
        struct Nudge(usize, f64);
        impl ParamVisitor for Nudge {
            fn visit_f32(&mut self, _: &mut Param<f32>) {}
            fn visit_f64(&mut self, p: &mut Param<f64>) {
                if self.0 < p.len() {
                    p.value[self.0] += self.1;
                    self.0 = usize::MAX / 2;
                } else if self.0 != usize::MAX / 2 {
                    self.0 -= p.len();
                }
            }
        }
        head.visit_params(&mut Nudge(idx, delta));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = CountingHead::new(cfg(3, 4, 10.0, 10.0), Init::Uniform { gain: 1.0 }, &mut rng).unwrap();
            let feats: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<f64> = (0..4).map(|_| rng.random_range(2.0..5.0)).collect();
            let outs: Vec<_> = feats.iter().map(|f| head.forward(f).unwrap()).collect();
            let counts: Vec<f64> = outs.iter().map(|o| o.count).collect();
            let dists: Vec<Vec<f64>> = outs.iter().map(|o| o.class_dist.clone()).collect();
            let g = counting_loss_grad(&counts, &labels, &dists, &head.config, None).unwrap();
            for i in 0..4 {
                head.backward(&feats[i], &outs[i], g.grad_counts[i], &g.grad_dists[i]);
            }
            let mut analytic = Vec::new();
            head.visit_params(&mut Flat(&mut analytic, true));
            let eps = 1e-6;
            for (idx, &a) in analytic.iter().enumerate() {
                let mut up = head.clone();
                nudge(&mut up, idx, eps);
                let mut down = head.clone();
                nudge(&mut down, idx, -eps);
                let fd = (loss_of(&up, &feats, &labels) - loss_of(&down, &feats, &labels)) / (2.0 * eps);
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-3), "seed {seed} param {idx}: fd {fd} analytic {a}");
            }
        }
    }

    fn softmax_batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..7).prop_flat_map(|(n, p)| prop::collection::vec(prop::collection::vec(-4.0f64..4.0, p), n)).prop_map(|z| z.iter().map(|r| softmax(r)).collect())
    }

    proptest! {
        #[test]
        fn diversity_bounded(d in softmax_batch()) {
            let p = d[0].len() as f64;
            let v = diversity_loss(&d).unwrap();
            prop_assert!(v >= -1e-12 && v <= p * (p - 1.0) / 2.0 + 1e-9);
        }

        #[test]
        fn count_is_shift_invariant(counts in prop::collection::vec(-5.0f64..5.0, 1..6), shift in -10.0f64..10.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = counts.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = fixed_head(&counts, &logits).forward(&[1.0]).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let b = fixed_head(&counts, &shifted).forward(&[1.0]).unwrap();
            prop_assert!((a.count - b.count).abs() < 1e-9);
            prop_assert!((a.class_dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let expect: f64 = a.per_class_counts.iter().zip(&a.class_dist).map(|(c, t)| c * t).sum();
            prop_assert!((a.count - expect).abs() < 1e-6);
        }

        #[test]
        fn duplicated_batch_keeps_loss_without_diversity(v in prop::collection::vec((0.0f64..10.0, 0.5f64..10.0), 1..8)) {
            let c = cfg(2, 1, 10.0, 0.0);
            let (counts, labels): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let d = vec![vec![0.5, 0.5]; counts.len()];
            let once = counting_loss(&counts, &labels, &d, &c, None).unwrap();
            let cc: Vec<f64> = counts.iter().chain(&counts).cloned().collect();
            let ll: Vec<f64> = labels.iter().chain(&labels).cloned().collect();
            let dd = vec![vec![0.5, 0.5]; cc.len()];
            prop_assert!((counting_loss(&cc, &ll, &dd, &c, None).unwrap() - once).abs() < 1e-9 * (1.0 + once));
        }
    }
}
