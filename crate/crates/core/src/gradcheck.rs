//! Central finite-difference oracle for the analytic prompt gradients.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{build_encoders, EncoderConfig, ImageEncoding, TextEncoder};
use crate::error::Result;
use crate::linalg::{gaussian_matrix, gaussian_vector, unit_vector};
use crate::objective::{
    dpac_client_loss, dpac_with_grad, total_loss, total_loss_and_grad, AlignmentConfig,
    DpacTargets, LossContext, ModelConfig,
};
use crate::ot::SolverConfig;
use crate::prompt::{PrivatePrompt, PromptSet, SharedPrompt};
use crate::rng::child_rng;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are treated as this in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` for every entry.
pub fn central_difference<F>(params: &Array2<f64>, h: f64, mut f: F) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> Result<f64>,
{
    let mut grad = Array2::zeros(params.dim());
    let mut x = params.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = x[idx];
        x[idx] = orig + h;
        let plus = f(&x)?;
        x[idx] = orig - h;
        let minus = f(&x)?;
        x[idx] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_j |a_j - n_j| / max(|a_j|, |n_j|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCase {
    /// Cosine-softmax cross-entropy, no alignment term.
    SoftmaxCe,
    /// Alignment term alone w.r.t. the private prompt.
    Dpac,
    /// Transport prediction path plus the alignment term.
    Transport,
}

impl GradCase {
    pub const ALL: [GradCase; 3] = [GradCase::SoftmaxCe, GradCase::Dpac, GradCase::Transport];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::SoftmaxCe => "softmax-ce",
            GradCase::Dpac => "dpac",
            GradCase::Transport => "transport",
        }
    }

    /// Acceptance bound on the max relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            GradCase::SoftmaxCe | GradCase::Dpac => 1e-4,
            GradCase::Transport => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub case: GradCase,
    pub seed: u64,
    /// `None` when the case has no gradient for this block.
    pub shared: Option<f64>,
    pub private: Option<f64>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.shared.unwrap_or(0.0).max(self.private.unwrap_or(0.0))
    }
}

/// A small random problem: encoders, prompts, a labelled batch and
/// alignment targets.
struct Instance {
    text: TextEncoder,
    prompts: PromptSet,
    images: Vec<ImageEncoding>,
    labels: Vec<usize>,
    targets: DpacTargets,
    model: ModelConfig,
}

fn instance(case: GradCase, seed: u64) -> Result<Instance> {
    let mut rng = child_rng(seed, &format!("gradcheck/{}", case.name()));
    let (e, d, v, k) = (6, 5, 4, 3);
    let enc = EncoderConfig {
        feature_dim: d,
        patch_count: v,
        embed_dim: e,
        seed: rng.random(),
        patch_spread: 0.5,
        domain_offset: 1.0,
    };
    let (image, text) = build_encoders(&enc)?;
    let mut class_embeddings = Array2::zeros((k, e));
    for mut row in class_embeddings.rows_mut() {
        row.assign(&unit_vector(&mut rng, e));
    }
    let prompts = PromptSet::from_parts(
        SharedPrompt(gaussian_matrix(&mut rng, 2, e, 0.3)),
        PrivatePrompt(gaussian_matrix(&mut rng, 2, e, 0.3)),
        class_embeddings,
    )?;
    let images = (0..3)
        .map(|_| image.encode(gaussian_vector(&mut rng, e, 1.0).view()))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..3).map(|_| rng.random_range(0..k)).collect();
    let targets = DpacTargets {
        anchor: gaussian_vector(&mut rng, d, 1.0),
        peers: (0..3).map(|_| gaussian_vector(&mut rng, d, 1.0)).collect(),
    };
    let temperature = rng.random_range(0.05..1.0);
    let model = ModelConfig {
        temperature,
        dual_prompt: true,
        alignment: AlignmentConfig {
            scale: rng.random_range(1.0..10.0),
            dpac_weight: if case == GradCase::SoftmaxCe {
                0.0
            } else {
                1.0
            },
            dpac_enabled: case != GradCase::SoftmaxCe,
            cmfac_enabled: case == GradCase::Transport,
        },
        solver: SolverConfig {
            lambda: rng.random_range(0.05..0.5),
            max_iters: 100_000,
            tol: 1e-14,
        },
        ..ModelConfig::default()
    };
    Ok(Instance {
        text,
        prompts,
        images,
        labels,
        targets,
        model,
    })
}

fn objective_report(case: GradCase, seed: u64, inst: &Instance) -> Result<GradReport> {
    let batch: Vec<(&ImageEncoding, usize)> = inst
        .images
        .iter()
        .zip(inst.labels.iter().copied())
        .collect();
    let ctx = LossContext {
        text: &inst.text,
        prompts: &inst.prompts,
        model: &inst.model,
        dpac: Some(&inst.targets),
    };
    let report = total_loss_and_grad(&ctx, &batch)?;
    let eval = |prompts: &PromptSet| {
        let ctx = LossContext {
            text: &inst.text,
            prompts,
            model: &inst.model,
            dpac: Some(&inst.targets),
        };
        total_loss(&ctx, &batch)
    };
    let num_shared = central_difference(&inst.prompts.shared.0, FD_STEP, |x| {
        let mut p = inst.prompts.clone();
        p.shared = SharedPrompt(x.clone());
        eval(&p)
    })?;
    let num_private = central_difference(&inst.prompts.private.0, FD_STEP, |x| {
        let mut p = inst.prompts.clone();
        p.private = PrivatePrompt(x.clone());
        eval(&p)
    })?;
    Ok(GradReport {
        case,
        seed,
        shared: Some(max_relative_error(&report.grads.shared, &num_shared)),
        private: Some(max_relative_error(&report.grads.private, &num_private)),
    })
}

fn dpac_report(seed: u64, inst: &Instance) -> Result<GradReport> {
    let probe = inst
        .prompts
        .class_embeddings()
        .row(inst.model.probe_class)
        .to_owned();
    let scale = inst.model.alignment.scale;
    let t = &inst.targets;
    let enc = inst
        .text
        .encode(inst.prompts.private.view(), probe.view())?;
    let (_, g) = dpac_with_grad(enc.feature.view(), t.anchor.view(), &t.peers, scale)?;
    let analytic = enc.pullback(g.view());
    let numeric = central_difference(&inst.prompts.private.0, FD_STEP, |x| {
        let f: Array1<f64> = inst.text.encode_feature(x.view(), probe.view())?;
        dpac_client_loss(f.view(), t.anchor.view(), &t.peers, scale)
    })?;
    Ok(GradReport {
        case: GradCase::Dpac,
        seed,
        shared: None,
        private: Some(max_relative_error(&analytic, &numeric)),
    })
}

/// Compares analytic and finite-difference gradients on one seeded instance.
pub fn check_case(case: GradCase, seed: u64) -> Result<GradReport> {
    let inst = instance(case, seed)?;
    match case {
        GradCase::Dpac => dpac_report(seed, &inst),
        _ => objective_report(case, seed, &inst),
    }
}

/// `configs` seeded instances of every case, seeds `base_seed..`.
pub fn run_gradcheck(base_seed: u64, configs: usize) -> Result<Vec<GradReport>> {
    let mut out = Vec::with_capacity(3 * configs);
    for case in GradCase::ALL {
        for i in 0..configs as u64 {
            out.push(check_case(case, base_seed.wrapping_add(i))?);
        }
    }
    Ok(out)
}
