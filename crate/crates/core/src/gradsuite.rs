//! Finite-difference checks of every hand-derived gradient in the crate,
//! grouped by module.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::classifier::{cross_entropy, Head, LinearHead, PromptBank};
use crate::encoders::MlpEncoder;
use crate::error::{Error, Result};
use crate::numeric::{check_gradient, splitmix64, Matrix, SeededRng, DEFAULT_FD_STEP};
use crate::objectives::{
    cloob_loss, hopfield_retrieve, hopfield_retrieve_backward, info_loob, info_nce,
    ContrastiveBatch, LossValueAndGrads,
};
use crate::replay::{kl_gauss, kl_gauss_grad, vae_loss_with_noise, VaeConfig, VaeModel};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const POINTS_PER_OP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SuiteModule {
    Encoders,
    Objectives,
    Replay,
    Classifier,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 4] = [
        SuiteModule::Encoders,
        SuiteModule::Objectives,
        SuiteModule::Replay,
        SuiteModule::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteModule::Encoders => "encoders",
            SuiteModule::Objectives => "objectives",
            SuiteModule::Replay => "replay",
            SuiteModule::Classifier => "classifier",
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SuiteModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown module `{s}` (expected all, encoders, objectives, replay or classifier)")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub module: SuiteModule,
    pub op: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

type Scalar = Box<dyn Fn(&[f64]) -> f64>;
type Gradient = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Problem {
    value: Scalar,
    grad: Gradient,
    x: Vec<f64>,
}

/// Builds a problem from one function returning both value and gradient.
fn from_eval(eval: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'static, x: Vec<f64>) -> Problem {
    let eval = Rc::new(eval);
    let e2 = Rc::clone(&eval);
    Problem {
        value: Box::new(move |v| eval(v).map(|r| r.0).unwrap_or(f64::NAN)),
        grad: Box::new(move |v| e2(v).map(|r| r.1).unwrap_or_default()),
        x,
    }
}

type Builder = fn(&mut SeededRng) -> Result<Problem>;

const OPS: [(SuiteModule, &str, Builder); 14] = [
    (
        SuiteModule::Encoders,
        "encoders.forward_normalized",
        encoder_params_normalized,
    ),
    (
        SuiteModule::Encoders,
        "encoders.forward_unnormalized",
        encoder_params_unnormalized,
    ),
    (SuiteModule::Encoders, "encoders.input", encoder_input),
    (
        SuiteModule::Objectives,
        "objectives.info_nce",
        objective_info_nce,
    ),
    (
        SuiteModule::Objectives,
        "objectives.info_loob",
        objective_info_loob,
    ),
    (
        SuiteModule::Objectives,
        "objectives.hopfield_retrieve",
        objective_hopfield,
    ),
    (
        SuiteModule::Objectives,
        "objectives.cloob_loss",
        objective_cloob,
    ),
    (
        SuiteModule::Objectives,
        "objectives.contrastive_through_encoders",
        objective_through_encoders,
    ),
    (SuiteModule::Replay, "replay.kl_gauss", replay_kl),
    (SuiteModule::Replay, "replay.vae_loss", replay_vae),
    (
        SuiteModule::Classifier,
        "classifier.cross_entropy",
        classifier_cross_entropy,
    ),
    (
        SuiteModule::Classifier,
        "classifier.classify",
        classifier_classify,
    ),
    (
        SuiteModule::Classifier,
        "classifier.prompt_pipeline",
        classifier_prompt,
    ),
    (
        SuiteModule::Classifier,
        "classifier.linear_head",
        classifier_linear,
    ),
];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(_, n, _)| *n).collect()
}

/// Runs the checks of `module` (all modules when `None`) at
/// [`POINTS_PER_OP`] seeded points each. `corrupt` names an operation whose
/// analytic gradient is deliberately scaled by 1.5, to exercise the failure
/// path.
pub fn run_suite(
    module: Option<SuiteModule>,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<Vec<OpCheck>> {
    if let Some(name) = corrupt {
        if !OPS.iter().any(|(_, n, _)| *n == name) {
            return Err(Error::Config(format!("unknown gradient check `{name}`")));
        }
    }
    let mut out = Vec::new();
    for (index, &(m, op, build)) in OPS.iter().enumerate() {
        if module.is_some_and(|want| want != m) {
            continue;
        }
        let mut worst = 0.0f64;
        for point in 0..POINTS_PER_OP {
            let mut state = seed ^ ((index as u64) << 40) ^ point as u64;
            let mut rng = SeededRng::new(splitmix64(&mut state));
            let problem = build(&mut rng)?;
            let grad: Gradient = if corrupt == Some(op) {
                let g = problem.grad;
                Box::new(move |x| g(x).into_iter().map(|v| 1.5 * v).collect())
            } else {
                problem.grad
            };
            let report = check_gradient(&problem.value, &grad, &problem.x, DEFAULT_FD_STEP)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            module: m,
            op,
            points: POINTS_PER_OP,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::new(rows, cols, rng.normal_vec(rows * cols)).expect("shape is consistent")
}

/// `Σ upstream ⊙ encoder(batch)` as a function of the encoder parameters.
fn encoder_params(normalize: bool, rng: &mut SeededRng) -> Result<Problem> {
    let enc = MlpEncoder::init_network(5, 6, 4, normalize, rng)?;
    let batch = random_matrix(3, 5, rng);
    let upstream = random_matrix(3, 4, rng);
    let x = enc.flat_params();
    let (e1, b1, u1) = (enc.clone(), batch.clone(), upstream.clone());
    let value = move |p: &[f64]| -> f64 {
        e1.with_flat_params(p)
            .and_then(|e| e.encode(&b1))
            .map(|out| weighted_sum(&out, &u1))
            .unwrap_or(f64::NAN)
    };
    let grad = move |p: &[f64]| -> Vec<f64> {
        enc.with_flat_params(p)
            .and_then(|e| e.backward(&batch, &upstream))
            .map(|(g, _)| g.flat())
            .unwrap_or_default()
    };
    Ok(Problem {
        value: Box::new(value),
        grad: Box::new(grad),
        x,
    })
}

fn encoder_params_normalized(rng: &mut SeededRng) -> Result<Problem> {
    encoder_params(true, rng)
}

fn encoder_params_unnormalized(rng: &mut SeededRng) -> Result<Problem> {
    encoder_params(false, rng)
}

fn encoder_input(rng: &mut SeededRng) -> Result<Problem> {
    let enc = MlpEncoder::init(5, 6, 4, rng)?;
    let batch = random_matrix(3, 5, rng);
    let upstream = random_matrix(3, 4, rng);
    let x = batch.data().to_vec();
    let (e1, u1) = (enc.clone(), upstream.clone());
    let value = move |v: &[f64]| -> f64 {
        Matrix::new(3, 5, v.to_vec())
            .and_then(|b| e1.encode(&b))
            .map(|out| weighted_sum(&out, &u1))
            .unwrap_or(f64::NAN)
    };
    let grad = move |v: &[f64]| -> Vec<f64> {
        Matrix::new(3, 5, v.to_vec())
            .and_then(|b| enc.backward(&b, &upstream))
            .map(|(_, d)| d.into_data())
            .unwrap_or_default()
    };
    Ok(Problem {
        value: Box::new(value),
        grad: Box::new(grad),
        x,
    })
}

fn weighted_sum(a: &Matrix, w: &Matrix) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

type Loss = fn(&ContrastiveBatch) -> Result<LossValueAndGrads>;

/// A contrastive loss of raw (unnormalized) rows, normalized inside the
/// function so finite differences stay on valid batches.
fn contrastive_problem(loss: Loss, rng: &mut SeededRng) -> Result<Problem> {
    let (n, d) = (5, 4);
    let mut x = rng.normal_vec(n * d);
    x.extend(rng.normal_vec(n * d));
    let eval = move |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let rx = Matrix::new(n, d, v[..n * d].to_vec())?;
        let ry = Matrix::new(n, d, v[n * d..].to_vec())?;
        let (nx, ny) = (rx.row_norms(), ry.row_norms());
        let batch = ContrastiveBatch::new(rx.normalize_rows()?, ry.normalize_rows()?)?;
        let out = loss(&batch)?;
        let mut g = Vec::with_capacity(2 * n * d);
        for (unit, norms, up) in [(batch.x(), &nx, &out.grad_x), (batch.y(), &ny, &out.grad_y)] {
            for (i, &pre) in norms.iter().enumerate() {
                g.extend(crate::numeric::normalize_backward(
                    unit.row(i),
                    pre,
                    up.row(i),
                ));
            }
        }
        Ok((out.loss, g))
    };
    Ok(from_eval(eval, x))
}

fn objective_info_nce(rng: &mut SeededRng) -> Result<Problem> {
    contrastive_problem(|b| info_nce(b, 0.5), rng)
}

fn objective_info_loob(rng: &mut SeededRng) -> Result<Problem> {
    contrastive_problem(|b| info_loob(b, 0.5), rng)
}

fn objective_cloob(rng: &mut SeededRng) -> Result<Problem> {
    contrastive_problem(|b| cloob_loss(b, 0.5, 4.0), rng)
}

/// `Σ upstream ⊙ retrieve(memory, queries)` over memory and queries jointly.
fn objective_hopfield(rng: &mut SeededRng) -> Result<Problem> {
    let (m, q, d) = (4, 3, 5);
    let beta = 0.5 + 2.5 * rng.next_f64();
    let upstream = random_matrix(q, d, rng);
    // Rows of roughly unit norm keep the softmax away from saturation, where
    // gradients of some memory rows fall below finite-difference resolution.
    let scale = 1.0 / (d as f64).sqrt();
    let x: Vec<f64> = rng
        .normal_vec((m + q) * d)
        .iter()
        .map(|v| v * scale)
        .collect();
    let split = move |v: &[f64]| -> Result<(Matrix, Matrix)> {
        Ok((
            Matrix::new(m, d, v[..m * d].to_vec())?,
            Matrix::new(q, d, v[m * d..].to_vec())?,
        ))
    };
    let u1 = upstream.clone();
    let value = move |v: &[f64]| -> f64 {
        split(v)
            .and_then(|(mem, qs)| hopfield_retrieve(&mem, &qs, beta))
            .map(|r| weighted_sum(&r, &u1))
            .unwrap_or(f64::NAN)
    };
    let grad = move |v: &[f64]| -> Vec<f64> {
        split(v)
            .and_then(|(mem, qs)| hopfield_retrieve_backward(&mem, &qs, beta, &upstream))
            .map(|(dm, dq)| {
                let mut g = dm.into_data();
                g.extend(dq.into_data());
                g
            })
            .unwrap_or_default()
    };
    Ok(Problem {
        value: Box::new(value),
        grad: Box::new(grad),
        x,
    })
}

/// Contrastive loss of both encoders' outputs, as a function of the image
/// encoder parameters.
fn objective_through_encoders(rng: &mut SeededRng) -> Result<Problem> {
    let image = MlpEncoder::init(4, 6, 3, rng)?;
    let text = MlpEncoder::init(5, 6, 3, rng)?;
    let raw = random_matrix(4, 4, rng);
    let tok = random_matrix(4, 5, rng);
    let targets = text.encode(&tok)?;
    let use_cloob = rng.next_f64() < 0.5;
    let x = image.flat_params();
    let eval = move |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let enc = image.with_flat_params(p)?;
        let cache = enc.forward(&raw)?;
        let batch = ContrastiveBatch::new(cache.output.clone(), targets.clone())?;
        let out = if use_cloob {
            cloob_loss(&batch, 0.5, 3.0)?
        } else {
            info_nce(&batch, 0.5)?
        };
        let (g, _) = enc.backward_with_cache(&raw, &cache, &out.grad_x)?;
        Ok((out.loss, g.flat()))
    };
    Ok(from_eval(eval, x))
}

fn replay_kl(rng: &mut SeededRng) -> Result<Problem> {
    let d = 6;
    let x = rng.normal_vec(2 * d);
    let value = move |v: &[f64]| kl_gauss(&v[..d], &v[d..]).unwrap_or(f64::NAN);
    let grad = move |v: &[f64]| {
        let (mut g_mu, g_lv) = kl_gauss_grad(&v[..d], &v[d..]);
        g_mu.extend(g_lv);
        g_mu
    };
    Ok(Problem {
        value: Box::new(value),
        grad: Box::new(grad),
        x,
    })
}

/// `L_VAE` as a function of all VAE parameters, with the noise held fixed.
fn replay_vae(rng: &mut SeededRng) -> Result<Problem> {
    let cfg = VaeConfig {
        latent_dim: 3,
        hidden_dim: 5,
        lambda_r: 0.5 + rng.next_f64(),
        ..VaeConfig::default()
    };
    let model = VaeModel::new(4, &cfg, rng)?;
    let features = random_matrix(3, 4, rng).normalize_rows()?;
    let noise = random_matrix(3, cfg.latent_dim, rng);
    let x = model.flat_params();
    let eval = move |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let m = model.with_flat_params(p)?;
        let (loss, grads) = vae_loss_with_noise(&m, &features, &noise)?;
        Ok((loss.total, grads.flat()))
    };
    Ok(from_eval(eval, x))
}

fn random_labels(n: usize, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

fn classifier_cross_entropy(rng: &mut SeededRng) -> Result<Problem> {
    let (n, c) = (4, 5);
    let labels = random_labels(n, c, rng);
    let x = rng.normal_vec(n * c);
    let eval = move |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (loss, g) = cross_entropy(&Matrix::new(n, c, v.to_vec())?, &labels)?;
        Ok((loss, g.into_data()))
    };
    Ok(from_eval(eval, x))
}

/// Cross-entropy of cosine logits as a function of the class features.
fn classifier_classify(rng: &mut SeededRng) -> Result<Problem> {
    let (n, c, d) = (5, 3, 4);
    let tau = 0.2 + rng.next_f64();
    let images = random_matrix(n, d, rng).normalize_rows()?;
    let labels = random_labels(n, c, rng);
    let x = rng.normal_vec(c * d);
    let eval = move |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let classes = Matrix::new(c, d, v.to_vec())?;
        let logits = crate::classifier::classify(&images, &classes, tau)?;
        let (loss, d_logits) = cross_entropy(&logits, &labels)?;
        Ok((
            loss,
            d_logits.t_matmul(&images)?.scaled(1.0 / tau).into_data(),
        ))
    };
    Ok(from_eval(eval, x))
}

fn head_problem(
    head: Head,
    text: MlpEncoder,
    rng: &mut SeededRng,
    d_emb: usize,
) -> Result<Problem> {
    let n = 6;
    let features = random_matrix(n, d_emb, rng).normalize_rows()?;
    let labels = random_labels(n, head.num_classes(), rng);
    let x: Vec<f64> = head
        .trainable_params()
        .iter()
        .map(|_| 0.5 * rng.next_normal())
        .collect();
    let eval = move |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        head.with_trainable_params(v)?
            .loss_and_gradient(&features, &labels, &text, 0.25)
    };
    Ok(from_eval(eval, x))
}

/// Context vectors → prompts → frozen text encoder → cosine logits → loss.
fn classifier_prompt(rng: &mut SeededRng) -> Result<Problem> {
    let (d_tok, d_emb) = (5, 4);
    let text = MlpEncoder::init(d_tok, 6, d_emb, rng)?;
    let tokens: Vec<(u32, Vec<f64>)> = (0..3).map(|c| (c, rng.normal_vec(d_tok))).collect();
    let bank = PromptBank::new(3, d_tok)?.carry_forward(0, &tokens)?;
    head_problem(Head::Prompt(bank), text, rng, d_emb)
}

fn classifier_linear(rng: &mut SeededRng) -> Result<Problem> {
    let d_emb = 4;
    let text = MlpEncoder::init(2, 2, 2, rng)?;
    let head = LinearHead::new(d_emb).carry_forward(&[0, 1, 2])?;
    head_problem(Head::Linear(head), text, rng, d_emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let checks = run_suite(None, 0, None).unwrap();
        assert_eq!(checks.len(), OPS.len());
        for c in &checks {
            assert!(c.passed(), "{} max rel error {:e}", c.op, c.max_rel_error);
            assert_eq!(c.points, POINTS_PER_OP);
        }
        for m in SuiteModule::ALL {
            assert!(checks.iter().any(|c| c.module == m));
        }
    }

    #[test]
    fn module_filter() {
        let checks = run_suite(Some(SuiteModule::Objectives), 1, None).unwrap();
        assert!(checks.iter().all(|c| c.module == SuiteModule::Objectives));
        assert!(checks
            .iter()
            .any(|c| c.op == "objectives.hopfield_retrieve"));
    }

    #[test]
    fn corruption_is_caught() {
        let checks = run_suite(Some(SuiteModule::Replay), 0, Some("replay.vae_loss")).unwrap();
        let bad = checks.iter().find(|c| c.op == "replay.vae_loss").unwrap();
        assert!(!bad.passed());
        assert!(checks
            .iter()
            .find(|c| c.op == "replay.kl_gauss")
            .unwrap()
            .passed());
        assert!(run_suite(None, 0, Some("nope")).is_err());
    }
}
