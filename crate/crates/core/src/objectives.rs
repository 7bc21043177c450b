//! Training objectives over ⟨child, parent, negative parent⟩ Gaussian triples.
//!
//! Every loss returns its value together with analytic gradients with respect
//! to the means and the box offsets (`σ² = o²`, so `∂/∂o = 2o · ∂/∂σ²`).

use crate::error::{Error, Result};
use crate::geometry::{floored, DiagGaussian, VARIANCE_FLOOR};

/// Lower bound on the argument of `ln(1 - BC)` in the symmetric loss.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussTriple {
    pub child: DiagGaussian,
    pub parent: DiagGaussian,
    pub neg_parent: DiagGaussian,
}

impl GaussTriple {
    pub fn new(child: DiagGaussian, parent: DiagGaussian, neg_parent: DiagGaussian) -> Result<Self> {
        for other in [&parent, &neg_parent] {
            if other.dim() != child.dim() {
                return Err(Error::DimensionMismatch {
                    expected: child.dim(),
                    actual: other.dim(),
                });
            }
        }
        Ok(GaussTriple {
            child,
            parent,
            neg_parent,
        })
    }

    pub fn dim(&self) -> usize {
        self.child.dim()
    }
}

/// Loss hyperparameters. Defaults: margin 1, λ 0.3, C 1.5, variance band
/// [0.01, 10], weights 0.45 / 0.45 / 0.10.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossHyper {
    pub margin: f64,
    pub lambda: f64,
    pub c_scale: f64,
    pub min_var: f64,
    pub max_var: f64,
    pub w_sym: f64,
    pub w_asym: f64,
    pub w_vol: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            margin: 1.0,
            lambda: 0.3,
            c_scale: 1.5,
            min_var: 0.01,
            max_var: 10.0,
            w_sym: 0.45,
            w_asym: 0.45,
            w_vol: 0.10,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        let finite = [
            self.margin,
            self.lambda,
            self.c_scale,
            self.min_var,
            self.max_var,
            self.w_sym,
            self.w_asym,
            self.w_vol,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return bad("loss hyperparameters must be finite");
        }
        if self.margin <= 0.0 {
            return bad("margin must be positive");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if self.c_scale <= 0.0 {
            return bad("C must be positive");
        }
        if self.min_var <= 0.0 || self.max_var <= self.min_var {
            return bad("need 0 < min_var < max_var");
        }
        if self.w_sym < 0.0 || self.w_asym < 0.0 || self.w_vol < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.w_sym + self.w_asym + self.w_vol <= 0.0 {
            return bad("loss weights must not all be zero");
        }
        Ok(())
    }
}

/// Gradient with respect to one Gaussian box: its mean (= center) and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussGrad {
    pub mean: Vec<f64>,
    pub offset: Vec<f64>,
}

impl GaussGrad {
    pub fn zeros(d: usize) -> Self {
        GaussGrad {
            mean: vec![0.0; d],
            offset: vec![0.0; d],
        }
    }

    pub fn add_scaled(&mut self, other: &GaussGrad, s: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += s * b;
        }
        for (a, b) in self.offset.iter_mut().zip(&other.offset) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.offset).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub child: GaussGrad,
    pub parent: GaussGrad,
    pub neg_parent: GaussGrad,
}

impl GradBundle {
    pub fn zeros(d: usize) -> Self {
        GradBundle {
            child: GaussGrad::zeros(d),
            parent: GaussGrad::zeros(d),
            neg_parent: GaussGrad::zeros(d),
        }
    }

    pub fn add_scaled(&mut self, other: &GradBundle, s: f64) {
        self.child.add_scaled(&other.child, s);
        self.parent.add_scaled(&other.parent, s);
        self.neg_parent.add_scaled(&other.neg_parent, s);
    }

    pub fn is_finite(&self) -> bool {
        self.child.is_finite() && self.parent.is_finite() && self.neg_parent.is_finite()
    }
}

/// A scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: GradBundle,
    /// Set when the `ln(1 - BC)` argument hit [`LOG_CLAMP`].
    pub clamped: bool,
}

// Gradients in (mean, variance) coordinates, converted to offsets at the end.
struct VarGrad {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl VarGrad {
    fn zeros(d: usize) -> Self {
        VarGrad {
            mean: vec![0.0; d],
            var: vec![0.0; d],
        }
    }

    fn into_offset(self, g: &DiagGaussian, scale: f64) -> GaussGrad {
        GaussGrad {
            mean: self.mean.iter().map(|m| scale * m).collect(),
            offset: self
                .var
                .iter()
                .zip(g.variance())
                .map(|(dv, v)| scale * dv * 2.0 * v.sqrt())
                .collect(),
        }
    }

    fn add_into(&self, out: &mut VarGrad, s: f64) {
        for (a, b) in out.mean.iter_mut().zip(&self.mean) {
            *a += s * b;
        }
        for (a, b) in out.var.iter_mut().zip(&self.var) {
            *a += s * b;
        }
    }
}

#[inline]
fn floor_mask(v: f64) -> f64 {
    if v < VARIANCE_FLOOR {
        0.0
    } else {
        1.0
    }
}

fn bhattacharyya_with_grad(p: &DiagGaussian, q: &DiagGaussian) -> (f64, VarGrad, VarGrad) {
    let d = p.dim();
    let (mut gp, mut gq) = (VarGrad::zeros(d), VarGrad::zeros(d));
    let mut val = 0.0;
    for i in 0..d {
        let (rv1, rv2) = (p.variance()[i], q.variance()[i]);
        let (v1, v2) = (floored(rv1), floored(rv2));
        let vm = 0.5 * (v1 + v2);
        let dm = p.mean()[i] - q.mean()[i];
        val += 0.125 * dm * dm / vm + 0.5 * (vm.ln() - 0.5 * (v1.ln() + v2.ln()));
        gp.mean[i] = 0.25 * dm / vm;
        gq.mean[i] = -gp.mean[i];
        let common = -dm * dm / (16.0 * vm * vm) + 0.25 / vm;
        gp.var[i] = (common - 0.25 / v1) * floor_mask(rv1);
        gq.var[i] = (common - 0.25 / v2) * floor_mask(rv2);
    }
    (val, gp, gq)
}

fn kl_with_grad(p: &DiagGaussian, q: &DiagGaussian) -> (f64, VarGrad, VarGrad) {
    let d = p.dim();
    let (mut gp, mut gq) = (VarGrad::zeros(d), VarGrad::zeros(d));
    let mut acc = 0.0;
    for i in 0..d {
        let (rvp, rvq) = (p.variance()[i], q.variance()[i]);
        let (vp, vq) = (floored(rvp), floored(rvq));
        let dm = q.mean()[i] - p.mean()[i];
        acc += vp / vq + dm * dm / vq - 1.0 + vq.ln() - vp.ln();
        gp.mean[i] = -dm / vq;
        gq.mean[i] = dm / vq;
        gp.var[i] = 0.5 * (1.0 / vq - 1.0 / vp) * floor_mask(rvp);
        gq.var[i] = 0.5 * (-(vp + dm * dm) / (vq * vq) + 1.0 / vq) * floor_mask(rvq);
    }
    (0.5 * acc, gp, gq)
}

fn log_volume_with_grad(g: &DiagGaussian) -> (f64, VarGrad) {
    let mut grad = VarGrad::zeros(g.dim());
    let mut val = 0.0;
    for (i, &v) in g.variance().iter().enumerate() {
        val += 0.5 * floored(v).ln();
        grad.var[i] = 0.5 / floored(v) * floor_mask(v);
    }
    (val, grad)
}

fn check_triple(t: &GaussTriple) -> Result<()> {
    for g in [&t.parent, &t.neg_parent] {
        if g.dim() != t.child.dim() {
            return Err(Error::DimensionMismatch {
                expected: t.child.dim(),
                actual: g.dim(),
            });
        }
    }
    Ok(())
}

/// `-ln BC(parent, child) - ln(1 - BC(neg_parent, child))`.
pub fn sym_loss(t: &GaussTriple) -> Result<Loss> {
    check_triple(t)?;
    let d = t.dim();
    let (db_pos, gp, gc_pos) = bhattacharyya_with_grad(&t.parent, &t.child);
    let (db_neg, gn, gc_neg) = bhattacharyya_with_grad(&t.neg_parent, &t.child);

    // 1 - BC = -expm1(-D), accurate for tiny D
    let one_minus_bc = -(-db_neg).exp_m1();
    let clamped = one_minus_bc < LOG_CLAMP;
    let (neg_term, dneg) = if clamped {
        (-LOG_CLAMP.ln(), 0.0)
    } else {
        (-one_minus_bc.ln(), -1.0 / db_neg.exp_m1())
    };

    let mut gc = VarGrad::zeros(d);
    gc_pos.add_into(&mut gc, 1.0);
    gc_neg.add_into(&mut gc, dneg);
    Ok(Loss {
        value: db_pos + neg_term,
        grad: GradBundle {
            child: gc.into_offset(&t.child, 1.0),
            parent: gp.into_offset(&t.parent, 1.0),
            neg_parent: gn.into_offset(&t.neg_parent, dneg),
        },
        clamped,
    })
}

/// `max(0, KL(c‖p) - KL(c‖p') + margin)`.
pub fn align_loss(t: &GaussTriple, margin: f64) -> Result<Loss> {
    check_triple(t)?;
    let d = t.dim();
    let (kl_pos, gc_pos, gp) = kl_with_grad(&t.child, &t.parent);
    let (kl_neg, gc_neg, gn) = kl_with_grad(&t.child, &t.neg_parent);
    let pre = kl_pos - kl_neg + margin;
    if pre <= 0.0 {
        return Ok(Loss {
            value: 0.0,
            grad: GradBundle::zeros(d),
            clamped: false,
        });
    }
    let mut gc = VarGrad::zeros(d);
    gc_pos.add_into(&mut gc, 1.0);
    gc_neg.add_into(&mut gc, -1.0);
    Ok(Loss {
        value: pre,
        grad: GradBundle {
            child: gc.into_offset(&t.child, 1.0),
            parent: gp.into_offset(&t.parent, 1.0),
            neg_parent: gn.into_offset(&t.neg_parent, -1.0),
        },
        clamped: false,
    })
}

/// `max(0, C·(logVol(p) - logVol(c)) - KL(p‖c))`. The returned bundle carries
/// gradients in its `parent` and `child` slots only.
pub fn diverge_loss(parent: &DiagGaussian, child: &DiagGaussian, c_scale: f64) -> Result<Loss> {
    if parent.dim() != child.dim() {
        return Err(Error::DimensionMismatch {
            expected: child.dim(),
            actual: parent.dim(),
        });
    }
    let d = child.dim();
    let (lv_p, glv_p) = log_volume_with_grad(parent);
    let (lv_c, glv_c) = log_volume_with_grad(child);
    let (kl, gkl_p, gkl_c) = kl_with_grad(parent, child);
    let pre = c_scale * (lv_p - lv_c) - kl;
    if pre <= 0.0 {
        return Ok(Loss {
            value: 0.0,
            grad: GradBundle::zeros(d),
            clamped: false,
        });
    }
    let mut gp = VarGrad::zeros(d);
    glv_p.add_into(&mut gp, c_scale);
    gkl_p.add_into(&mut gp, -1.0);
    let mut gc = VarGrad::zeros(d);
    glv_c.add_into(&mut gc, -c_scale);
    gkl_c.add_into(&mut gc, -1.0);
    Ok(Loss {
        value: pre,
        grad: GradBundle {
            child: gc.into_offset(child, 1.0),
            parent: gp.into_offset(parent, 1.0),
            neg_parent: GaussGrad::zeros(d),
        },
        clamped: false,
    })
}

/// `align + λ·diverge(parent, child)`.
pub fn asym_loss(t: &GaussTriple, margin: f64, lambda: f64, c_scale: f64) -> Result<Loss> {
    let mut out = align_loss(t, margin)?;
    if lambda != 0.0 {
        let div = diverge_loss(&t.parent, &t.child, c_scale)?;
        out.value += lambda * div.value;
        out.grad.add_scaled(&div.grad, lambda);
    }
    Ok(out)
}

/// `(1/d) Σ max(0, min_var - σ_i²)²`.
pub fn min_var_reg(g: &DiagGaussian, min_var: f64) -> (f64, GaussGrad) {
    let d = g.dim() as f64;
    let mut grad = VarGrad::zeros(g.dim());
    let mut val = 0.0;
    for (i, &v) in g.variance().iter().enumerate() {
        let gap = min_var - v;
        if gap > 0.0 {
            val += gap * gap;
            grad.var[i] = -2.0 * gap / d;
        }
    }
    (val / d, grad.into_offset(g, 1.0))
}

/// `(1/d) Σ max(0, σ_i² - max_var)`.
pub fn clip_reg(g: &DiagGaussian, max_var: f64) -> (f64, GaussGrad) {
    let d = g.dim() as f64;
    let mut grad = VarGrad::zeros(g.dim());
    let mut val = 0.0;
    for (i, &v) in g.variance().iter().enumerate() {
        if v > max_var {
            val += v - max_var;
            grad.var[i] = 1.0 / d;
        }
    }
    (val / d, grad.into_offset(g, 1.0))
}

/// Unweighted component values of one [`overall_loss`] evaluation.
/// Components disabled by a zero weight are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub sym: f64,
    pub align: f64,
    pub diverge: f64,
    pub reg: f64,
    pub clip: f64,
    pub clamped: bool,
}

/// Weighted sum `w_sym·L_sym + w_asym·L_asym + w_vol·(L_reg + L_clip)`, the
/// volume terms summed over child, parent and negative parent.
pub fn overall_loss(t: &GaussTriple, h: &LossHyper) -> Result<(LossParts, GradBundle)> {
    check_triple(t)?;
    let mut parts = LossParts::default();
    let mut grad = GradBundle::zeros(t.dim());

    if h.w_sym != 0.0 {
        let s = sym_loss(t)?;
        parts.sym = s.value;
        parts.clamped = s.clamped;
        grad.add_scaled(&s.grad, h.w_sym);
    }
    if h.w_asym != 0.0 {
        let a = align_loss(t, h.margin)?;
        parts.align = a.value;
        grad.add_scaled(&a.grad, h.w_asym);
        if h.lambda != 0.0 {
            let dv = diverge_loss(&t.parent, &t.child, h.c_scale)?;
            parts.diverge = dv.value;
            grad.add_scaled(&dv.grad, h.w_asym * h.lambda);
        }
    }
    if h.w_vol != 0.0 {
        let slots = [
            (&t.child, &mut grad.child),
            (&t.parent, &mut grad.parent),
            (&t.neg_parent, &mut grad.neg_parent),
        ];
        for (g, out) in slots {
            let (r, gr) = min_var_reg(g, h.min_var);
            let (c, gc) = clip_reg(g, h.max_var);
            parts.reg += r;
            parts.clip += c;
            out.add_scaled(&gr, h.w_vol);
            out.add_scaled(&gc, h.w_vol);
        }
    }
    parts.total = h.w_sym * parts.sym
        + h.w_asym * (parts.align + h.lambda * parts.diverge)
        + h.w_vol * (parts.reg + parts.clip);
    Ok((parts, grad))
}
