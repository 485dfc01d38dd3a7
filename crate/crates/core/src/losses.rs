//! Layout losses: horizon depth, room height, floor-plan normals and depth
//! gradients, their weighted composition, the teacher-consistency term and
//! the ramp-up schedule.
//!
//! Every term returns its value together with the gradient with respect to
//! the decoded depth vector and height, so the model can chain it back to
//! its raw outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{column_longitude, LayoutTarget};
use crate::model::{PredictionGrad, PredictionTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub height: f64,
    /// Applied to both the normal and the gradient term.
    pub normal_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 0.9,
            height: 0.1,
            normal_grad: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.depth, self.height, self.normal_grad].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// A scalar with its gradient with respect to decoded depth and height.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    pub d_depth: Vec<f64>,
    pub d_height: f64,
}

impl ScalarGrad {
    fn zeros(w: usize) -> Self {
        Self {
            value: 0.0,
            d_depth: vec![0.0; w],
            d_height: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &ScalarGrad, s: f64) {
        self.value += s * other.value;
        self.d_height += s * other.d_height;
        for (a, b) in self.d_depth.iter_mut().zip(&other.d_depth) {
            *a += s * b;
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute depth error over columns.
pub fn loss_depth(pred: &[f64], target: &[f64]) -> ScalarGrad {
    let w = pred.len() as f64;
    let mut value = 0.0;
    let d_depth = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            value += (p - t).abs();
            sign(p - t) / w
        })
        .collect();
    ScalarGrad {
        value: value / w,
        d_depth,
        d_height: 0.0,
    }
}

/// Absolute room-height error.
pub fn loss_height(pred: f64, target: f64, width: usize) -> ScalarGrad {
    ScalarGrad {
        value: (pred - target).abs(),
        d_depth: vec![0.0; width],
        d_height: sign(pred - target),
    }
}

/// Floor-plan edge `p_{u+1} − p_u` for circular column `u`.
fn edge(depth: &[f64], dirs: &[[f64; 2]], u: usize) -> [f64; 2] {
    let v = (u + 1) % depth.len();
    [
        depth[v] * dirs[v][0] - depth[u] * dirs[u][0],
        depth[v] * dirs[v][1] - depth[u] * dirs[u][1],
    ]
}

fn directions(w: usize) -> Vec<[f64; 2]> {
    (0..w)
        .map(|u| {
            let (s, c) = column_longitude(u, w).sin_cos();
            [c, s]
        })
        .collect()
}

/// Mean cosine distance between predicted and target floor-plan edge
/// normals. Zero-length edges are skipped.
pub fn loss_normal(pred: &[f64], target: &[f64]) -> ScalarGrad {
    let w = pred.len();
    let dirs = directions(w);
    let mut out = ScalarGrad::zeros(w);
    let mut counted = 0usize;
    let mut grads = Vec::with_capacity(w);
    for u in 0..w {
        let e = edge(pred, &dirs, u);
        let t = edge(target, &dirs, u);
        let (le, lt) = (e[0].hypot(e[1]), t[0].hypot(t[1]));
        if le == 0.0 || lt == 0.0 {
            continue;
        }
        counted += 1;
        // Rotating both edges by 90° leaves the dot product unchanged, so
        // n·n̂ equals the edge cosine.
        let n = [e[1] / le, -e[0] / le];
        let nt = [t[1] / lt, -t[0] / lt];
        let cos = if e == t {
            1.0
        } else {
            (n[0] * nt[0] + n[1] * nt[1]).clamp(-1.0, 1.0)
        };
        out.value += 1.0 - cos;
        // ∂(1 − cos)/∂e = −(t̂/|e| − cos·e/|e|²)
        let ge = [
            -(t[0] / (lt * le) - cos * e[0] / (le * le)),
            -(t[1] / (lt * le) - cos * e[1] / (le * le)),
        ];
        grads.push((u, ge));
    }
    if counted == 0 {
        log::warn!("normal loss: every edge has zero length");
        return out;
    }
    let inv = 1.0 / counted as f64;
    out.value *= inv;
    for (u, ge) in grads {
        let v = (u + 1) % w;
        out.d_depth[v] += inv * (ge[0] * dirs[v][0] + ge[1] * dirs[v][1]);
        out.d_depth[u] -= inv * (ge[0] * dirs[u][0] + ge[1] * dirs[u][1]);
    }
    out
}

/// Mean absolute difference of circular first differences.
pub fn loss_gradient(pred: &[f64], target: &[f64]) -> ScalarGrad {
    let w = pred.len();
    let mut out = ScalarGrad::zeros(w);
    let inv = 1.0 / w as f64;
    for u in 0..w {
        let v = (u + 1) % w;
        let diff = (pred[v] - pred[u]) - (target[v] - target[u]);
        out.value += diff.abs();
        let s = sign(diff) * inv;
        out.d_depth[v] += s;
        out.d_depth[u] -= s;
    }
    out.value *= inv;
    out
}

/// Individual terms of a composite evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub depth: f64,
    pub height: f64,
    pub normal: f64,
    pub gradient: f64,
    pub total: f64,
}

/// `w_d·L_d + w_h·L_h + w_ng·(L_n + L_g)` for decoded predictions against a
/// depth/height target, with gradient.
pub fn composite_terms(
    pred_depth: &[f64],
    pred_height: f64,
    target_depth: &[f64],
    target_height: f64,
    w: &LossWeights,
) -> Result<(LossTerms, ScalarGrad)> {
    let width = pred_depth.len();
    if target_depth.len() != width || width < 3 {
        return Err(Error::Shape(format!(
            "loss needs equal widths >= 3, got {width} and {}",
            target_depth.len()
        )));
    }
    let ld = loss_depth(pred_depth, target_depth);
    let lh = loss_height(pred_height, target_height, width);
    let ln = loss_normal(pred_depth, target_depth);
    let lg = loss_gradient(pred_depth, target_depth);
    let mut g = ScalarGrad::zeros(width);
    g.add_scaled(&ld, w.depth);
    g.add_scaled(&lh, w.height);
    g.add_scaled(&ln, w.normal_grad);
    g.add_scaled(&lg, w.normal_grad);
    let terms = LossTerms {
        depth: ld.value,
        height: lh.value,
        normal: ln.value,
        gradient: lg.value,
        total: g.value,
    };
    Ok((terms, g))
}

/// Composite loss of a prediction against a depth/height target; the
/// gradient is with respect to the raw prediction channels.
pub fn composite_loss(
    pred: &PredictionTensor,
    target_depth: &[f64],
    target_height: f64,
    w: &LossWeights,
) -> Result<(LossTerms, PredictionGrad)> {
    let (terms, g) = composite_terms(&pred.depth(), pred.height(), target_depth, target_height, w)?;
    Ok((terms, pred.chain(&g.d_depth, g.d_height)))
}

/// Composite loss against ground truth.
pub fn supervised_loss(z_stu: &PredictionTensor, target: &LayoutTarget, w: &LossWeights) -> Result<(LossTerms, PredictionGrad)> {
    composite_loss(z_stu, &target.depth, target.height, w)
}

/// Consistency of the two perturbed student predictions with the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub feat: LossTerms,
    pub img: LossTerms,
    pub grad_feat: PredictionGrad,
    pub grad_img: PredictionGrad,
}

/// `L(Z_tea, Z_feat) + L(Z_tea, Z_img)`, using the teacher's decoded depth
/// and height as targets. The teacher prediction must be untracked.
pub fn consistency_loss(
    z_tea: &PredictionTensor,
    z_feat: &PredictionTensor,
    z_img: &PredictionTensor,
    w: &LossWeights,
) -> Result<ConsistencyLoss> {
    if z_tea.is_tracked() {
        return Err(Error::invalid("teacher prediction carries a gradient tape"));
    }
    let (t_depth, t_height) = (z_tea.depth(), z_tea.height());
    let (feat, grad_feat) = composite_loss(z_feat, &t_depth, t_height, w)?;
    let (img, grad_img) = composite_loss(z_img, &t_depth, t_height, w)?;
    Ok(ConsistencyLoss {
        value: feat.total + img.total,
        feat,
        img,
        grad_feat,
        grad_img,
    })
}

/// Ramp-up horizon `I` and run length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub rampup_end: usize,
    pub total_iters: usize,
}

impl RampSchedule {
    /// `I = round(fraction · total_iters)`, at least 1.
    pub fn from_fraction(total_iters: usize, fraction: f64) -> Result<Self> {
        if total_iters == 0 || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "ramp-up needs total_iters > 0 and fraction in (0, 1], got {total_iters}, {fraction}"
            )));
        }
        let end = ((fraction * total_iters as f64).round() as usize).max(1);
        Ok(Self {
            rampup_end: end,
            total_iters,
        })
    }
}

/// `λ(i) = exp(−5(1 − i/I)²)` up to `I`, then 1.
pub fn ramp_weight(i: usize, sched: &RampSchedule) -> f64 {
    if i >= sched.rampup_end {
        return 1.0;
    }
    let x = 1.0 - i as f64 / sched.rampup_end as f64;
    (-5.0 * x * x).exp()
}

/// `L_sup + λ·L_con`.
pub fn total_loss(l_sup: f64, l_con: f64, lambda: f64) -> f64 {
    l_sup + lambda * l_con
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wavy(w: usize, phase: f64) -> Vec<f64> {
        (0..w).map(|u| 2.0 + 0.7 * ((u as f64) * 0.4 + phase).sin()).collect()
    }

    // Independent normal-loss implementation: explicit polygon points and
    // atan2-based angle differences.
    fn normal_oracle(pred: &[f64], target: &[f64]) -> f64 {
        let w = pred.len();
        let pts = |d: &[f64]| -> Vec<(f64, f64)> {
            (0..w)
                .map(|u| {
                    let th = (u as f64 + 0.5) / w as f64 * std::f64::consts::TAU - std::f64::consts::PI;
                    (d[u] * th.cos(), d[u] * th.sin())
                })
                .collect()
        };
        let (p, t) = (pts(pred), pts(target));
        let mut acc = 0.0;
        for u in 0..w {
            let v = (u + 1) % w;
            let a = (p[v].1 - p[u].1).atan2(p[v].0 - p[u].0);
            let b = (t[v].1 - t[u].1).atan2(t[v].0 - t[u].0);
            acc += 1.0 - (a - b).cos();
        }
        acc / w as f64
    }

    #[test]
    fn depth_and_height_examples() {
        let t = wavy(16, 0.0);
        assert_eq!(loss_depth(&t, &t).value, 0.0);
        let shifted: Vec<f64> = t.iter().map(|x| x + 0.3).collect();
        assert!((loss_depth(&shifted, &t).value - 0.3).abs() < 1e-12);
        assert_eq!(loss_height(2.5, 3.0, 4).value, 0.5);
        let p = wavy(37, 1.3);
        let naive = p.iter().zip(&t.iter().cycle().take(37).copied().collect::<Vec<_>>()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 37.0;
        let t37: Vec<f64> = t.iter().cycle().take(37).copied().collect();
        assert!((loss_depth(&p, &t37).value - naive).abs() < 1e-12);
    }

    #[test]
    fn normal_loss_examples() {
        let t = wavy(32, 0.2);
        assert!(loss_normal(&t, &t).value.abs() < 1e-15);
        let scaled: Vec<f64> = t.iter().map(|x| 1.7 * x).collect();
        assert!(loss_normal(&scaled, &t).value.abs() < 1e-12);
        let p = wavy(32, 0.9);
        assert!((loss_normal(&p, &t).value - normal_oracle(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn gradient_loss_examples() {
        let t = wavy(12, 0.0);
        let off: Vec<f64> = t.iter().map(|x| x + 5.0).collect();
        assert!(loss_gradient(&off, &t).value.abs() < 1e-12);
        assert_eq!(loss_gradient(&t, &t).value, 0.0);
        // Sawtooth [1,2,1,2] vs flat: |differences| are all 1 → mean 1.
        let saw = [1.0, 2.0, 1.0, 2.0];
        assert_eq!(loss_gradient(&saw, &[1.5; 4]).value, 1.0);
        // [1,2,3,4] vs flat: differences 1,1,1,−3 → mean 6/4.
        assert_eq!(loss_gradient(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).value, 1.5);
    }

    #[test]
    fn composite_examples() {
        let w = LossWeights::default();
        let t = wavy(24, 0.0);
        let (terms, _) = composite_terms(&t, 2.8, &t, 2.8, &w).unwrap();
        assert_eq!(terms.total, 0.0);
        let p: Vec<f64> = t.iter().map(|x| 1.1 * x).collect();
        let (terms, _) = composite_terms(&p, 3.0, &t, 2.8, &w).unwrap();
        let expect = 0.9 * loss_depth(&p, &t).value + 0.1 * 0.2 + loss_gradient(&p, &t).value;
        assert!(terms.normal.abs() < 1e-12);
        assert!((terms.total - expect).abs() < 1e-12);
        let zero = LossWeights {
            depth: 0.0,
            height: 0.0,
            normal_grad: 0.0,
        };
        let (terms, g) = composite_terms(&p, 3.0, &t, 2.8, &zero).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(g.d_depth.iter().all(|&x| x == 0.0) && g.d_height == 0.0);
        assert!(composite_terms(&p[..5], 3.0, &t, 2.8, &w).is_err());
    }

    #[test]
    fn consistency_examples() {
        let w = LossWeights::default();
        let mk = |ph: f64| PredictionTensor::from_raw(wavy(16, ph), vec![0.3; 16], vec![0.0; 16]).unwrap();
        let (tea, a, b) = (mk(0.0), mk(0.5), mk(1.1));
        assert_eq!(consistency_loss(&tea, &tea, &tea, &w).unwrap().value, 0.0);
        let ab = consistency_loss(&tea, &a, &b, &w).unwrap();
        let ba = consistency_loss(&tea, &b, &a, &w).unwrap();
        assert_eq!(ab.value, ba.value);
        let sep = composite_loss(&a, &tea.depth(), tea.height(), &w).unwrap().0.total
            + composite_loss(&b, &tea.depth(), tea.height(), &w).unwrap().0.total;
        assert!((ab.value - sep).abs() < 1e-12);
    }

    #[test]
    fn ramp_examples() {
        let s = RampSchedule::from_fraction(1000, 0.3).unwrap();
        assert_eq!(s.rampup_end, 300);
        assert_eq!(ramp_weight(300, &s), 1.0);
        assert!((ramp_weight(0, &s) - (-5f64).exp()).abs() < 1e-12);
        assert!((ramp_weight(150, &s) - (-1.25f64).exp()).abs() < 1e-12);
        assert_eq!(ramp_weight(5000, &s), 1.0);
        assert_eq!(total_loss(2.0, 3.0, 0.5), 3.5);
        assert_eq!(total_loss(2.0, 3.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 0.0, 1.0), 2.0);
        assert!(RampSchedule::from_fraction(0, 0.3).is_err());
    }

    // Central differences on the decoded-space gradients.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let w = LossWeights::default();
        let t = wavy(20, 0.0);
        let p = wavy(20, 0.77);
        let (_, g) = composite_terms(&p, 2.9, &t, 2.7, &w).unwrap();
        let eps = 1e-6;
        for u in 0..20 {
            let mut hi = p.clone();
            hi[u] += eps;
            let mut lo = p.clone();
            lo[u] -= eps;
            let fd = (composite_terms(&hi, 2.9, &t, 2.7, &w).unwrap().0.total
                - composite_terms(&lo, 2.9, &t, 2.7, &w).unwrap().0.total)
                / (2.0 * eps);
            assert!((fd - g.d_depth[u]).abs() < 1e-6, "u={u}: fd {fd} vs {}", g.d_depth[u]);
        }
    }

    proptest! {
        #[test]
        fn composite_is_nonnegative(ph in 0.0f64..6.0, s in 0.5f64..2.0, h in 1.0f64..4.0) {
            let t = wavy(16, 0.0);
            let p: Vec<f64> = wavy(16, ph).iter().map(|x| s * x).collect();
            let (terms, _) = composite_terms(&p, h, &t, 2.5, &LossWeights::default()).unwrap();
            prop_assert!(terms.total >= 0.0);
        }

        #[test]
        fn normal_loss_scale_invariant(ph in 0.0f64..6.0, s in 0.1f64..10.0) {
            let t = wavy(16, 0.0);
            let p = wavy(16, ph);
            let ps: Vec<f64> = p.iter().map(|x| s * x).collect();
            let ts: Vec<f64> = t.iter().map(|x| s * x).collect();
            prop_assert!((loss_normal(&ps, &ts).value - loss_normal(&p, &t).value).abs() < 1e-12);
        }

        #[test]
        fn ramp_is_monotone(a in 0usize..2000, b in 0usize..2000) {
            let s = RampSchedule::from_fraction(1000, 0.3).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(ramp_weight(lo, &s) <= ramp_weight(hi, &s));
        }
    }
}
