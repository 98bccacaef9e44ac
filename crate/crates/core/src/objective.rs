//! Training objective: cross-entropy over class predictions, the dual-prompt
//! alignment term, and their analytic gradients w.r.t. both prompts.
//!
//! Prediction paths:
//!
//! * transport (`cmfac_enabled`): for class `k` the text atoms are the shared
//!   (and, with dual prompts, private) text features of class `k`; the entropic
//!   partial OT distance `d_k` to the image patches gives `p = softmax((1 - d) / tau)`;
//! * cosine: `logit_k = cos(t_k, f) / tau` with a single prompt, or the mean of
//!   the shared and private cosines with dual prompts.
//!
//! Transport gradients hold the plan fixed, so `d d_k / d C = T*`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{ImageEncoding, TextEncoder, TextEncoding};
use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, normalized};
use crate::ot::{
    cost_matrix, grad_distance_wrt_text_features, ot_distance, solve_dykstra, SolverConfig,
    TransportProblem,
};
use crate::prompt::{predict_softmax_cosine, softmax, PredictionConfig, PromptRole, PromptSet};

/// Probability floor used by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Scale `s` inside the alignment exponent.
    pub scale: f64,
    /// Weight `mu` of the alignment term in the total loss.
    pub dpac_weight: f64,
    pub dpac_enabled: bool,
    pub cmfac_enabled: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            scale: 10.0,
            dpac_weight: 1.0,
            dpac_enabled: true,
            cmfac_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub temperature: f64,
    /// Shared + private prompts when true, shared prompt only when false.
    pub dual_prompt: bool,
    pub alignment: AlignmentConfig,
    pub solver: SolverConfig,
    /// Total image-side capacity; each patch gets `alpha_mass / V`.
    pub alpha_mass: f64,
    /// Text-side mass on the shared atom; the private atom gets the rest.
    pub beta_shared: f64,
    /// Class whose embedding feeds the alignment term.
    pub probe_class: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            dual_prompt: true,
            alignment: AlignmentConfig::default(),
            solver: SolverConfig::default(),
            alpha_mass: 2.0,
            beta_shared: 0.5,
            probe_class: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        PredictionConfig::new(self.temperature)?;
        let a = &self.alignment;
        if !(a.scale.is_finite() && a.scale > 0.0) {
            return Err(Error::range("dpac_scale", "must be finite and > 0"));
        }
        if !(a.dpac_weight.is_finite() && a.dpac_weight >= 0.0) {
            return Err(Error::range("dpac_weight", "must be finite and >= 0"));
        }
        if !(self.alpha_mass.is_finite() && self.alpha_mass >= 1.0) {
            return Err(Error::range("alpha_mass", "must be finite and >= 1"));
        }
        if !(self.beta_shared > 0.0 && self.beta_shared < 1.0) {
            return Err(Error::range(
                "beta_shared",
                "must lie strictly inside (0, 1)",
            ));
        }
        Ok(())
    }

    pub fn uses_dpac(&self) -> bool {
        self.dual_prompt && self.alignment.dpac_enabled
    }

    fn text_marginal(&self) -> Array1<f64> {
        if self.dual_prompt {
            Array1::from(vec![self.beta_shared, 1.0 - self.beta_shared])
        } else {
            Array1::from(vec![1.0])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `p[label]` was below [`PROB_FLOOR`] and got clamped.
    pub clamped: bool,
}

pub fn cross_entropy(p: ArrayView1<f64>, label: usize) -> Result<CrossEntropy> {
    if label >= p.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    ensure_finite(p.iter(), "probabilities")?;
    let q = p[label];
    let clamped = q < PROB_FLOOR;
    Ok(CrossEntropy {
        loss: -q.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Per-client alignment loss
/// `log(1 + sum_j exp(s <p, e_j> - s <p, e_own>))` on L2-normalized features.
pub fn dpac_client_loss(
    private_feature: ArrayView1<f64>,
    own_shared: ArrayView1<f64>,
    others: &[Array1<f64>],
    scale: f64,
) -> Result<f64> {
    Ok(dpac_with_grad(private_feature, own_shared, others, scale)?.0)
}

/// Loss and its gradient w.r.t. the (unnormalized) private feature.
pub fn dpac_with_grad(
    private_feature: ArrayView1<f64>,
    own_shared: ArrayView1<f64>,
    others: &[Array1<f64>],
    scale: f64,
) -> Result<(f64, Array1<f64>)> {
    let (p, p_norm) = normalized(private_feature, "private prompt feature")?;
    let (anchor, _) = normalized(own_shared, "shared prompt feature")?;
    let anchor_sim = p.dot(&anchor);
    let mut exps = Vec::with_capacity(others.len());
    let mut peers = Vec::with_capacity(others.len());
    for other in others {
        if other.len() != p.len() {
            return Err(Error::dim("peer shared feature", p.len(), other.len()));
        }
        let (q, _) = normalized(other.view(), "peer shared feature")?;
        exps.push(scale * (p.dot(&q) - anchor_sim));
        peers.push(q);
    }
    if exps.is_empty() {
        return Ok((0.0, Array1::zeros(p.len())));
    }
    // log(1 + sum exp x_j) as a log-sum-exp over {0, x_1, ..}
    let max = exps.iter().cloned().fold(0.0, f64::max);
    let denom = (-max).exp() + exps.iter().map(|x| (x - max).exp()).sum::<f64>();
    let loss = max + denom.ln();
    ensure_finite([loss].iter(), "alignment loss")?;
    // dL/dp for unit p, then through the normalization
    let mut grad_unit = Array1::<f64>::zeros(p.len());
    for (x, q) in exps.iter().zip(&peers) {
        let w = (x - max).exp() / denom;
        grad_unit += &((q - &anchor) * (scale * w));
    }
    let radial = grad_unit.dot(&p);
    let grad = (&grad_unit - &(&p * radial)) / p_norm;
    Ok((loss, grad))
}

/// Mean of the per-client alignment losses.
pub fn dpac_aggregate(per_client: &[f64]) -> Result<f64> {
    if per_client.is_empty() {
        return Err(Error::Config(
            "alignment aggregate over zero clients".into(),
        ));
    }
    ensure_finite(per_client.iter(), "per-client alignment losses")?;
    Ok(per_client.iter().sum::<f64>() / per_client.len() as f64)
}

/// `params <- params - lr * grads`.
pub fn sgd_step(params: &mut Array2<f64>, grads: ArrayView2<f64>, lr: f64) -> Result<()> {
    if params.dim() != grads.dim() {
        return Err(Error::Shape {
            tensor: "gradient".into(),
            expected: format!("{:?}", params.dim()),
            found: format!("{:?}", grads.dim()),
        });
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::range("lr", "must be finite and >= 0"));
    }
    params.scaled_add(-lr, &grads);
    Ok(())
}

/// Alignment targets for one client: the broadcast global shared feature and
/// the other clients' shared features from the previous round.
#[derive(Debug, Clone, Default)]
pub struct DpacTargets {
    pub anchor: Array1<f64>,
    pub peers: Vec<Array1<f64>>,
}

pub struct LossContext<'a> {
    pub text: &'a TextEncoder,
    pub prompts: &'a PromptSet,
    pub model: &'a ModelConfig,
    pub dpac: Option<&'a DpacTargets>,
}

#[derive(Debug, Clone)]
pub struct PromptGrads {
    pub shared: Array2<f64>,
    pub private: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub ce: f64,
    pub dpac: f64,
    pub total: f64,
    pub grads: PromptGrads,
    pub clamped: usize,
    pub unconverged_plans: usize,
}

/// Text features for every class under the current prompts.
struct TextBank {
    shared: Vec<TextEncoding>,
    private: Vec<TextEncoding>,
}

impl TextBank {
    fn build(text: &TextEncoder, prompts: &PromptSet, dual: bool) -> Result<Self> {
        let k = prompts.n_classes();
        let encode = |role| -> Result<Vec<TextEncoding>> {
            (0..k)
                .map(|c| {
                    let (p, e) = prompts.assemble(c, role)?;
                    text.encode(p, e)
                })
                .collect()
        };
        Ok(Self {
            shared: encode(PromptRole::Shared)?,
            private: if dual {
                encode(PromptRole::Private)?
            } else {
                Vec::new()
            },
        })
    }

    fn features(&self) -> Features {
        Features {
            shared: self.shared.iter().map(|t| t.feature.clone()).collect(),
            private: self.private.iter().map(|t| t.feature.clone()).collect(),
        }
    }
}

/// Class text features without Jacobians.
#[derive(Debug, Clone)]
pub struct Features {
    shared: Vec<Array1<f64>>,
    private: Vec<Array1<f64>>,
}

impl Features {
    pub fn build(text: &TextEncoder, prompts: &PromptSet, dual: bool) -> Result<Self> {
        let k = prompts.n_classes();
        let encode = |role| -> Result<Vec<Array1<f64>>> {
            (0..k)
                .map(|c| {
                    let (p, e) = prompts.assemble(c, role)?;
                    text.encode_feature(p, e)
                })
                .collect()
        };
        Ok(Self {
            shared: encode(PromptRole::Shared)?,
            private: if dual {
                encode(PromptRole::Private)?
            } else {
                Vec::new()
            },
        })
    }

    fn n_classes(&self) -> usize {
        self.shared.len()
    }

    fn atoms(&self, class: usize) -> Array2<f64> {
        let d = self.shared[class].len();
        let m = if self.private.is_empty() { 1 } else { 2 };
        let mut out = Array2::zeros((m, d));
        out.row_mut(0).assign(&self.shared[class]);
        if m == 2 {
            out.row_mut(1).assign(&self.private[class]);
        }
        out
    }
}

/// Per-sample forward pass: probabilities plus, on the transport path, the
/// fixed-plan gradient of each class distance w.r.t. its text atoms.
struct SampleForward {
    probs: Array1<f64>,
    atom_grads: Option<Vec<Array2<f64>>>,
    unconverged: usize,
}

fn forward_sample(
    features: &Features,
    image: &ImageEncoding,
    model: &ModelConfig,
    want_grad: bool,
) -> Result<SampleForward> {
    let k = features.n_classes();
    let tau = model.temperature;
    if model.alignment.cmfac_enabled {
        let v = image.patch_features.nrows();
        let alpha = Array1::from_elem(v, model.alpha_mass / v as f64);
        let beta = model.text_marginal();
        let mut distances = Array1::zeros(k);
        let mut grads = Vec::with_capacity(if want_grad { k } else { 0 });
        let mut unconverged = 0;
        for c in 0..k {
            let atoms = features.atoms(c);
            let cost = cost_matrix(image.patch_features.view(), atoms.view())?;
            let problem = TransportProblem::new(cost, alpha.clone(), beta.clone(), model.solver)?;
            let plan = solve_dykstra(&problem)?;
            if !plan.converged {
                unconverged += 1;
            }
            distances[c] = ot_distance(problem.cost(), plan.plan.view(), model.solver.lambda)?;
            if want_grad {
                grads.push(grad_distance_wrt_text_features(
                    plan.plan.view(),
                    image.patch_features.view(),
                ));
            }
        }
        let probs = crate::ot::predict_ot(distances.view(), tau)?;
        Ok(SampleForward {
            probs,
            atom_grads: want_grad.then_some(grads),
            unconverged,
        })
    } else if features.private.is_empty() {
        let d = image.pooled_feature.len();
        let mut text = Array2::zeros((k, d));
        for (c, f) in features.shared.iter().enumerate() {
            text.row_mut(c).assign(f);
        }
        let probs = predict_softmax_cosine(
            text.view(),
            image.pooled_feature.view(),
            &PredictionConfig::new(tau)?,
        )?;
        Ok(SampleForward {
            probs,
            atom_grads: None,
            unconverged: 0,
        })
    } else {
        let f = &image.pooled_feature;
        let logits = Array1::from_shape_fn(k, |c| {
            0.5 * (features.shared[c].dot(f) + features.private[c].dot(f)) / tau
        });
        Ok(SampleForward {
            probs: softmax(logits.view())?,
            atom_grads: None,
            unconverged: 0,
        })
    }
}

/// Class probabilities for one image under fixed prompts.
pub fn predict(
    features: &Features,
    image: &ImageEncoding,
    model: &ModelConfig,
) -> Result<Array1<f64>> {
    Ok(forward_sample(features, image, model, false)?.probs)
}

fn check_batch(
    batch: &[(&ImageEncoding, usize)],
    n_classes: usize,
    model: &ModelConfig,
) -> Result<()> {
    if model.probe_class >= n_classes {
        return Err(Error::Config(format!(
            "probe class {} out of range",
            model.probe_class
        )));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some((_, label)) = batch.iter().find(|(_, l)| *l >= n_classes) {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    Ok(())
}

fn dpac_value(ctx: &LossContext<'_>, private_probe: ArrayView1<f64>) -> Result<f64> {
    match ctx.dpac {
        Some(t) if ctx.model.uses_dpac() => dpac_client_loss(
            private_probe,
            t.anchor.view(),
            &t.peers,
            ctx.model.alignment.scale,
        ),
        _ => Ok(0.0),
    }
}

fn assemble_total(model: &ModelConfig, ce: f64, dpac: f64) -> f64 {
    if model.uses_dpac() {
        ce + model.alignment.dpac_weight * dpac
    } else {
        ce
    }
}

/// Value of the objective only (solves every transport problem afresh).
pub fn total_loss(ctx: &LossContext<'_>, batch: &[(&ImageEncoding, usize)]) -> Result<f64> {
    check_batch(batch, ctx.prompts.n_classes(), ctx.model)?;
    let features = Features::build(ctx.text, ctx.prompts, ctx.model.dual_prompt)?;
    let mut ce = 0.0;
    for (image, label) in batch {
        let fwd = forward_sample(&features, image, ctx.model, false)?;
        ce += cross_entropy(fwd.probs.view(), *label)?.loss;
    }
    ce /= batch.len() as f64;
    let dpac = if ctx.model.uses_dpac() {
        dpac_value(ctx, features.private[ctx.model.probe_class].view())?
    } else {
        0.0
    };
    Ok(assemble_total(ctx.model, ce, dpac))
}

/// Mean cross-entropy over `batch` plus the weighted alignment term, with
/// gradients for both prompts.
pub fn total_loss_and_grad(
    ctx: &LossContext<'_>,
    batch: &[(&ImageEncoding, usize)],
) -> Result<LossReport> {
    let model = ctx.model;
    let k = ctx.prompts.n_classes();
    check_batch(batch, k, model)?;
    let bank = TextBank::build(ctx.text, ctx.prompts, model.dual_prompt)?;
    let features = bank.features();
    let d = ctx.text.feature_dim();
    let tau = model.temperature;
    let scale = 1.0 / batch.len() as f64;

    let mut grad_shared_feat = Array2::<f64>::zeros((k, d));
    let mut grad_private_feat = Array2::<f64>::zeros((k, d));
    let mut ce = 0.0;
    let mut clamped = 0;
    let mut unconverged = 0;
    for (image, label) in batch {
        let fwd = forward_sample(&features, image, model, true)?;
        let xent = cross_entropy(fwd.probs.view(), *label)?;
        ce += xent.loss;
        clamped += usize::from(xent.clamped);
        unconverged += fwd.unconverged;
        // dCE/dlogit_c = p_c - [c == label]
        let mut dlogit = fwd.probs.clone();
        dlogit[*label] -= 1.0;
        dlogit *= scale;
        match fwd.atom_grads {
            Some(atom_grads) => {
                // logit_c = (1 - d_c) / tau
                for (c, g) in atom_grads.iter().enumerate() {
                    let coef = -dlogit[c] / tau;
                    grad_shared_feat.row_mut(c).scaled_add(coef, &g.row(0));
                    if model.dual_prompt {
                        grad_private_feat.row_mut(c).scaled_add(coef, &g.row(1));
                    }
                }
            }
            None => {
                let f = &image.pooled_feature;
                let share = if model.dual_prompt { 0.5 } else { 1.0 };
                for c in 0..k {
                    let coef = dlogit[c] * share / tau;
                    grad_shared_feat.row_mut(c).scaled_add(coef, f);
                    if model.dual_prompt {
                        grad_private_feat.row_mut(c).scaled_add(coef, f);
                    }
                }
            }
        }
    }
    ce *= scale;

    let mut dpac = 0.0;
    if let (Some(targets), true) = (ctx.dpac, model.uses_dpac()) {
        let probe = model.probe_class;
        let (loss, g) = dpac_with_grad(
            bank.private[probe].feature.view(),
            targets.anchor.view(),
            &targets.peers,
            model.alignment.scale,
        )?;
        dpac = loss;
        grad_private_feat
            .row_mut(probe)
            .scaled_add(model.alignment.dpac_weight, &g);
    }

    let mut shared = Array2::zeros(ctx.prompts.shared.0.dim());
    let mut private = Array2::zeros(ctx.prompts.private.0.dim());
    for c in 0..k {
        shared += &bank.shared[c].pullback(grad_shared_feat.row(c));
        if model.dual_prompt {
            private += &bank.private[c].pullback(grad_private_feat.row(c));
        }
    }
    let total = assemble_total(model, ce, dpac);
    ensure_finite([ce, dpac, total].iter(), "loss")?;
    Ok(LossReport {
        ce,
        dpac,
        total,
        grads: PromptGrads { shared, private },
        clamped,
        unconverged_plans: unconverged,
    })
}

/// Alignment targets from a broadcast: features of the global shared prompt
/// and the peers' snapshots, all with the probe class embedding.
pub fn dpac_targets(
    text: &TextEncoder,
    probe_embedding: ArrayView1<f64>,
    global_shared: ArrayView2<f64>,
    peer_shared: &[ArrayView2<f64>],
) -> Result<DpacTargets> {
    Ok(DpacTargets {
        anchor: text.encode_feature(global_shared, probe_embedding)?,
        peers: peer_shared
            .iter()
            .map(|p| text.encode_feature(*p, probe_embedding))
            .collect::<Result<_>>()?,
    })
}
