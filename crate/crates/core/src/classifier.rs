//! Incremental classifier heads.
//!
//! The prompt head (LP) shares a small set of learned context vectors across
//! every class: class `c` is represented by the frozen text encoder applied to
//! `mean(context) + token_c`, and images are scored by cosine similarity over
//! a temperature. The linear head (LC) is the baseline with one weight row
//! and bias per class.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::encoders::MlpEncoder;
use crate::error::{shape_err, Error, Result};
use crate::numeric::{log_sum_exp, softmax, Matrix, SeededRng};
use crate::snapshot::Snapshot;

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Learnable context plus frozen per-class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub context: Matrix,
    pub class_tokens: Matrix,
    pub class_ids: Vec<u32>,
    pub session_of_class: BTreeMap<u32, usize>,
}

impl PromptBank {
    /// Empty bank with zero-initialized context.
    pub fn new(prompt_length: usize, d_tok: usize) -> Result<Self> {
        if prompt_length == 0 || d_tok == 0 {
            return Err(Error::Config(format!(
                "prompt bank needs positive length and width, got {prompt_length}x{d_tok}"
            )));
        }
        Ok(Self {
            context: Matrix::zeros(prompt_length, d_tok),
            class_tokens: Matrix::zeros(0, d_tok),
            class_ids: Vec::new(),
            session_of_class: BTreeMap::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn prompt_length(&self) -> usize {
        self.context.rows()
    }

    pub fn param_count(&self) -> usize {
        self.context.data().len()
    }

    /// Keeps the learned context untouched and appends the new class tokens.
    pub fn carry_forward(&self, session: usize, new_classes: &[(u32, Vec<f64>)]) -> Result<Self> {
        let mut out = self.clone();
        for (id, token) in new_classes {
            if out.session_of_class.contains_key(id) {
                return Err(Error::Config(format!(
                    "class {id} is already in the prompt bank"
                )));
            }
            if token.len() != self.context.cols() {
                return Err(shape_err(format!(
                    "token of class {id} has {} entries, bank width is {}",
                    token.len(),
                    self.context.cols()
                )));
            }
            out.class_tokens.push_row(token)?;
            out.class_ids.push(*id);
            out.session_of_class.insert(*id, session);
        }
        Ok(out)
    }

    /// Text-encoder inputs, one row per class: `mean(context) + token_c`.
    pub fn prompt_inputs(&self) -> Result<Matrix> {
        let ctx = self.context.column_mean()?;
        let mut inputs = self.class_tokens.clone();
        for i in 0..inputs.rows() {
            for (x, c) in inputs.row_mut(i).iter_mut().zip(&ctx) {
                *x += c;
            }
        }
        Ok(inputs)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        s.insert_matrix("context", &self.context);
        s.insert_matrix("class_tokens", &self.class_tokens);
        s.insert_vector(
            "class_ids",
            &self.class_ids.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        );
        s.insert_vector(
            "sessions",
            &self
                .class_ids
                .iter()
                .map(|c| self.session_of_class[c] as f64)
                .collect::<Vec<_>>(),
        );
        s
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let context = s.matrix("context")?;
        let class_tokens = s.matrix("class_tokens")?;
        let class_ids: Vec<u32> = s.vector("class_ids")?.iter().map(|&v| v as u32).collect();
        let sessions = s.vector("sessions")?;
        if class_ids.len() != class_tokens.rows() || sessions.len() != class_ids.len() {
            return Err(shape_err("inconsistent prompt bank snapshot"));
        }
        let session_of_class = class_ids
            .iter()
            .zip(&sessions)
            .map(|(&c, &k)| (c, k as usize))
            .collect();
        Ok(Self {
            context,
            class_tokens,
            class_ids,
            session_of_class,
        })
    }
}

/// Linear-classifier baseline: `logits = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub class_ids: Vec<u32>,
}

impl LinearHead {
    pub fn new(d_emb: usize) -> Self {
        Self {
            weights: Matrix::zeros(0, d_emb),
            bias: Vec::new(),
            class_ids: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    /// Appends zero-initialized rows for new classes.
    pub fn carry_forward(&self, new_classes: &[u32]) -> Result<Self> {
        let mut out = self.clone();
        let zeros = vec![0.0; self.weights.cols()];
        for id in new_classes {
            if out.class_ids.contains(id) {
                return Err(Error::Config(format!(
                    "class {id} is already in the linear head"
                )));
            }
            out.weights.push_row(&zeros)?;
            out.bias.push(0.0);
            out.class_ids.push(*id);
        }
        Ok(out)
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut logits = features.matmul_t(&self.weights)?;
        for i in 0..logits.rows() {
            for (l, b) in logits.row_mut(i).iter_mut().zip(&self.bias) {
                *l += b;
            }
        }
        Ok(logits)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        s.insert_matrix("weights", &self.weights);
        s.insert_vector("bias", &self.bias);
        s.insert_vector(
            "class_ids",
            &self.class_ids.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        );
        s
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let head = Self {
            weights: s.matrix("weights")?,
            bias: s.vector("bias")?,
            class_ids: s.vector("class_ids")?.iter().map(|&v| v as u32).collect(),
        };
        if head.bias.len() != head.weights.rows() || head.class_ids.len() != head.bias.len() {
            return Err(shape_err("inconsistent linear head snapshot"));
        }
        Ok(head)
    }
}

/// Class features for every class in the bank, through the frozen text encoder.
pub fn text_features(bank: &PromptBank, text_encoder: &MlpEncoder) -> Result<Matrix> {
    if text_encoder.d_in() != bank.context.cols() {
        return Err(shape_err(format!(
            "text encoder takes {} inputs, prompt width is {}",
            text_encoder.d_in(),
            bank.context.cols()
        )));
    }
    text_encoder.encode(&bank.prompt_inputs()?)
}

/// Cosine logits `image_i · class_c / τ`.
pub fn classify(image_features: &Matrix, class_features: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "classifier temperature must be positive, got {tau}"
        )));
    }
    if image_features.cols() != class_features.cols() {
        return Err(shape_err(format!(
            "image features have {} dims, class features {}",
            image_features.cols(),
            class_features.cols()
        )));
    }
    Ok(image_features.matmul_t(class_features)?.scaled(1.0 / tau))
}

/// Mean negative log-likelihood and its gradient on the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(shape_err(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::InsufficientData(
            "cross entropy of an empty batch".into(),
        ));
    }
    let inv_n = 1.0 / logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::Label(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(i);
        loss += log_sum_exp(row)? - row[label];
        let p = softmax(row, 1.0)?;
        for (j, (g, pj)) in grad.row_mut(i).iter_mut().zip(&p).enumerate() {
            *g = inv_n * (pj - if j == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv_n, grad))
}

/// Gradient of the prompt pipeline with respect to the context matrix, given
/// the gradient on the class features.
fn context_gradient(
    bank: &PromptBank,
    text_encoder: &MlpEncoder,
    d_class_features: &Matrix,
) -> Result<Matrix> {
    let inputs = bank.prompt_inputs()?;
    let (_, d_inputs) = text_encoder.backward(&inputs, d_class_features)?;
    let l = bank.prompt_length();
    let mut per_row = vec![0.0; bank.context.cols()];
    for r in d_inputs.iter_rows() {
        for (p, g) in per_row.iter_mut().zip(r) {
            *p += g / l as f64;
        }
    }
    let mut grad = Matrix::zeros(l, bank.context.cols());
    for i in 0..l {
        grad.row_mut(i).copy_from_slice(&per_row);
    }
    Ok(grad)
}

/// Either classifier head.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Prompt(PromptBank),
    Linear(LinearHead),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Prompt,
    Linear,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Prompt => "prompt",
            ClassifierKind::Linear => "linear",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "prompt" | "lp" => Ok(ClassifierKind::Prompt),
            "linear" | "lc" => Ok(ClassifierKind::Linear),
            other => Err(format!(
                "unknown classifier `{other}` (expected prompt or linear)"
            )),
        }
    }
}

impl Head {
    pub fn class_ids(&self) -> &[u32] {
        match self {
            Head::Prompt(b) => &b.class_ids,
            Head::Linear(h) => &h.class_ids,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids().len()
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::Prompt(b) => b.param_count(),
            Head::Linear(h) => h.param_count(),
        }
    }

    pub fn carry_forward(&self, session: usize, new_classes: &[(u32, Vec<f64>)]) -> Result<Head> {
        match self {
            Head::Prompt(b) => Ok(Head::Prompt(b.carry_forward(session, new_classes)?)),
            Head::Linear(h) => {
                let ids: Vec<u32> = new_classes.iter().map(|(id, _)| *id).collect();
                Ok(Head::Linear(h.carry_forward(&ids)?))
            }
        }
    }

    pub fn logits(&self, features: &Matrix, text_encoder: &MlpEncoder, tau: f64) -> Result<Matrix> {
        match self {
            Head::Prompt(b) => classify(features, &text_features(b, text_encoder)?, tau),
            Head::Linear(h) => h.logits(features),
        }
    }

    /// Arg-max class index per row, ties to the lowest index.
    pub fn predict(
        &self,
        features: &Matrix,
        text_encoder: &MlpEncoder,
        tau: f64,
    ) -> Result<Vec<usize>> {
        let logits = self.logits(features, text_encoder, tau)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Trainable parameters: the context matrix, or weights then bias.
    pub fn trainable_params(&self) -> Vec<f64> {
        match self {
            Head::Prompt(b) => b.context.data().to_vec(),
            Head::Linear(h) => {
                let mut p = h.weights.data().to_vec();
                p.extend_from_slice(&h.bias);
                p
            }
        }
    }

    pub fn with_trainable_params(&self, params: &[f64]) -> Result<Head> {
        if params.len() != self.param_count() {
            return Err(shape_err(format!(
                "head has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut out = self.clone();
        match &mut out {
            Head::Prompt(b) => b.context.data_mut().copy_from_slice(params),
            Head::Linear(h) => {
                let n = h.weights.data().len();
                h.weights.data_mut().copy_from_slice(&params[..n]);
                h.bias.copy_from_slice(&params[n..]);
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy on `(features, labels)` and its gradient, laid out
    /// like [`Head::trainable_params`].
    pub fn loss_and_gradient(
        &self,
        features: &Matrix,
        labels: &[usize],
        text_encoder: &MlpEncoder,
        tau: f64,
    ) -> Result<(f64, Vec<f64>)> {
        match self {
            Head::Prompt(bank) => {
                let class_feats = text_features(bank, text_encoder)?;
                let logits = classify(features, &class_feats, tau)?;
                let (loss, d_logits) = cross_entropy(&logits, labels)?;
                let d_class = d_logits.t_matmul(features)?.scaled(1.0 / tau);
                let g = context_gradient(bank, text_encoder, &d_class)?;
                Ok((loss, g.into_data()))
            }
            Head::Linear(head) => {
                let logits = head.logits(features)?;
                let (loss, d_logits) = cross_entropy(&logits, labels)?;
                let mut g = d_logits.t_matmul(features)?.into_data();
                let mut d_b = vec![0.0; head.bias.len()];
                for r in d_logits.iter_rows() {
                    for (b, v) in d_b.iter_mut().zip(r) {
                        *b += v;
                    }
                }
                g.extend(d_b);
                Ok((loss, g))
            }
        }
    }

    /// Loss on `(features, labels)` and a gradient step of size `learning_rate`.
    fn step(
        &mut self,
        features: &Matrix,
        labels: &[usize],
        text_encoder: &MlpEncoder,
        tau: f64,
        learning_rate: f64,
    ) -> Result<f64> {
        let (loss, grad) = self.loss_and_gradient(features, labels, text_encoder, tau)?;
        let params: Vec<f64> = self
            .trainable_params()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - learning_rate * g)
            .collect();
        *self = self.with_trainable_params(&params)?;
        Ok(loss)
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Head::Prompt(b) => b.context.is_finite(),
            Head::Linear(h) => h.weights.is_finite() && h.bias.iter().all(|b| b.is_finite()),
        }
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        match self {
            Head::Prompt(b) => s.merge_prefixed("prompt", b.to_snapshot()),
            Head::Linear(h) => s.merge_prefixed("linear", h.to_snapshot()),
        }
        s
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Head> {
        let prompt = s.sub("prompt");
        if !prompt.entries().is_empty() {
            return Ok(Head::Prompt(PromptBank::from_snapshot(&prompt)?));
        }
        Ok(Head::Linear(LinearHead::from_snapshot(&s.sub("linear"))?))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Pseudo,
}

/// Session training set: unit-norm features with head-relative class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetView {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl TrainSetView {
    pub fn new(features: Matrix, labels: Vec<usize>, provenance: Vec<Provenance>) -> Result<Self> {
        if labels.len() != features.rows() || provenance.len() != features.rows() {
            return Err(shape_err(
                "train set features, labels and provenance differ in length",
            ));
        }
        Ok(Self {
            features,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, which: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == which).count()
    }

    /// Appends `other`; both must use the same feature width.
    pub fn extend(&mut self, other: TrainSetView) -> Result<()> {
        self.features = self.features.vstack(&other.features)?;
        self.labels.extend(other.labels);
        self.provenance.extend(other.provenance);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau_cls: f64,
}

/// Mini-batch gradient descent on `cross_entropy ∘ classify`.
///
/// Only the head changes; the text encoder is borrowed immutably. Returns the
/// updated head and the mini-batch loss at every step.
pub fn train_session(
    head: &Head,
    text_encoder: &MlpEncoder,
    trainset: &TrainSetView,
    cfg: &SessionTrainConfig,
    rng: &mut SeededRng,
) -> Result<(Head, Vec<f64>)> {
    if cfg.steps == 0 {
        return Err(Error::Config(
            "session training needs at least one step".into(),
        ));
    }
    if trainset.is_empty() {
        return Err(Error::Config("empty session training set".into()));
    }
    if let Some(&bad) = trainset.labels.iter().find(|&&l| l >= head.num_classes()) {
        return Err(Error::Label(format!(
            "train label {bad} out of range for {} classes",
            head.num_classes()
        )));
    }
    let batch = cfg.batch_size.max(1).min(trainset.len());
    let mut head = head.clone();
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let feats = trainset.features.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| trainset.labels[i]).collect();
        let loss = head.step(
            &feats,
            &labels,
            text_encoder,
            cfg.tau_cls,
            cfg.learning_rate,
        )?;
        if !loss.is_finite() || !head.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        trace.push(loss);
    }
    Ok((head, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradient, DEFAULT_FD_STEP};

    fn encoder(d_in: usize, d_emb: usize, seed: u64) -> MlpEncoder {
        MlpEncoder::init(d_in, 8, d_emb, &mut SeededRng::new(seed)).unwrap()
    }

    fn bank_with(tokens: &[Vec<f64>], l: usize) -> PromptBank {
        let d = tokens[0].len();
        let new: Vec<(u32, Vec<f64>)> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u32, t.clone()))
            .collect();
        PromptBank::new(l, d)
            .unwrap()
            .carry_forward(0, &new)
            .unwrap()
    }

    #[test]
    fn zero_context_is_plain_token_encoding() {
        let enc = encoder(4, 3, 1);
        let tokens = vec![vec![0.1, 0.2, -0.3, 0.5], vec![1.0, 0.0, 0.0, 0.0]];
        let bank = bank_with(&tokens, 1);
        let feats = text_features(&bank, &enc).unwrap();
        let direct = enc.encode(&Matrix::from_rows(&tokens).unwrap()).unwrap();
        assert_eq!(feats, direct);
    }

    #[test]
    fn identical_tokens_identical_features() {
        let enc = encoder(3, 3, 2);
        let t = vec![0.3, -0.1, 0.7];
        let mut bank = bank_with(&[t.clone(), t], 2);
        bank.context = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.0, 0.2]).unwrap();
        let feats = text_features(&bank, &enc).unwrap();
        assert_eq!(feats.row(0), feats.row(1));
        assert!(text_features(&bank, &encoder(4, 3, 2)).is_err());
    }

    #[test]
    fn classify_examples() {
        let classes = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let img = classes.select_rows(&[2]);
        let logits = classify(&img, &classes, 0.5).unwrap();
        assert_eq!(argmax(logits.row(0)), 2);
        let halved = classify(&img, &classes, 0.25).unwrap();
        for (a, b) in logits.data().iter().zip(halved.data()) {
            assert_eq!(2.0 * a, *b);
        }
        assert_eq!(argmax(halved.row(0)), 2);
        let same = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let u = classify(&Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(), &same, 0.1).unwrap();
        assert_eq!(u.get(0, 0), u.get(0, 1));
        assert!(classify(&img, &same, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Matrix::zeros(3, 5);
        let (loss, _) = cross_entropy(&logits, &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        let dominant = Matrix::from_rows(&[vec![100.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&dominant, &[0]).unwrap();
        assert!(loss < 1e-40);
        assert!(matches!(
            cross_entropy(&logits, &[0, 5, 1]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10 {
            let logits = Matrix::new(4, 3, rng.normal_vec(12)).unwrap();
            let labels = [0usize, 2, 1, 2];
            let (_, g) = cross_entropy(&logits, &labels).unwrap();
            let r = check_gradient(
                |v| {
                    cross_entropy(&Matrix::new(4, 3, v.to_vec()).unwrap(), &labels)
                        .unwrap()
                        .0
                },
                |_| g.data().to_vec(),
                logits.data(),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn prompt_pipeline_gradient() {
        let mut rng = SeededRng::new(4);
        let enc = encoder(5, 4, 9);
        let tokens: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(5)).collect();
        let mut bank = bank_with(&tokens, 2);
        bank.context = Matrix::new(2, 5, rng.normal_vec(10)).unwrap().scaled(0.3);
        let images = Matrix::new(6, 4, rng.normal_vec(24))
            .unwrap()
            .normalize_rows()
            .unwrap();
        let labels = [0usize, 1, 2, 0, 1, 2];
        let tau = 0.2;
        let loss_at = |ctx: &[f64]| {
            let mut b = bank.clone();
            b.context = Matrix::new(2, 5, ctx.to_vec()).unwrap();
            let logits = classify(&images, &text_features(&b, &enc).unwrap(), tau).unwrap();
            cross_entropy(&logits, &labels).unwrap().0
        };
        let logits = classify(&images, &text_features(&bank, &enc).unwrap(), tau).unwrap();
        let (_, d_logits) = cross_entropy(&logits, &labels).unwrap();
        let d_class = d_logits.t_matmul(&images).unwrap().scaled(1.0 / tau);
        let g = context_gradient(&bank, &enc, &d_class).unwrap();
        let r = check_gradient(
            loss_at,
            |_| g.data().to_vec(),
            bank.context.data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    fn two_class_set() -> TrainSetView {
        let mut rng = SeededRng::new(5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let base = if c == 0 {
                [1.0, 0.2, 0.0]
            } else {
                [0.2, 1.0, 0.0]
            };
            let v: Vec<f64> = base.iter().map(|b| b + 0.1 * rng.next_normal()).collect();
            rows.push(crate::numeric::l2_normalize(&v).unwrap());
            labels.push(c);
        }
        TrainSetView::new(
            Matrix::from_rows(&rows).unwrap(),
            labels,
            vec![Provenance::Real; 40],
        )
        .unwrap()
    }

    fn accuracy(head: &Head, enc: &MlpEncoder, set: &TrainSetView, tau: f64) -> f64 {
        let pred = head.predict(&set.features, enc, tau).unwrap();
        pred.iter().zip(&set.labels).filter(|(a, b)| a == b).count() as f64 / set.len() as f64
    }

    #[test]
    fn separable_set_is_learned_by_both_heads() {
        let set = two_class_set();
        let enc = encoder(3, 3, 6);
        let cfg = SessionTrainConfig {
            steps: 200,
            learning_rate: 0.5,
            batch_size: DEFAULT_BATCH_SIZE,
            tau_cls: 0.125,
        };
        let lc = Head::Linear(LinearHead::new(3).carry_forward(&[10, 11]).unwrap());
        let (lc, trace) = train_session(&lc, &enc, &set, &cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(trace.len(), 200);
        assert!(accuracy(&lc, &enc, &set, cfg.tau_cls) >= 0.95);
        // Identity-like text encoder so the prompt head sees the feature geometry.
        let mut ident = MlpEncoder::init(3, 3, 3, &mut SeededRng::new(0)).unwrap();
        ident.w1 = Matrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        ident.b1 = vec![0.0; 3];
        ident.w2 = ident.w1.clone();
        ident.b2 = vec![0.0; 3];
        let lp = Head::Prompt(bank_with(&[vec![0.6, 0.1, 0.1], vec![0.1, 0.6, 0.1]], 4));
        let (lp, _) = train_session(&lp, &ident, &set, &cfg, &mut SeededRng::new(1)).unwrap();
        assert!(accuracy(&lp, &ident, &set, cfg.tau_cls) >= 0.95);
    }

    #[test]
    fn zero_learning_rate_leaves_head_unchanged() {
        let set = two_class_set();
        let enc = encoder(3, 3, 7);
        let mut bank = bank_with(&[vec![0.5, 0.1, 0.0], vec![0.0, 0.4, 0.3]], 2);
        bank.context = Matrix::new(2, 3, vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1]).unwrap();
        let head = Head::Prompt(bank);
        let cfg = SessionTrainConfig {
            steps: 10,
            learning_rate: 0.0,
            batch_size: 8,
            tau_cls: 0.125,
        };
        let (after, trace) =
            train_session(&head, &enc, &set, &cfg, &mut SeededRng::new(2)).unwrap();
        assert_eq!(after, head);
        assert_eq!(trace.len(), 10);
    }

    #[test]
    fn training_is_deterministic() {
        let set = two_class_set();
        let enc = encoder(3, 3, 8);
        let head = Head::Prompt(bank_with(&[vec![0.5, 0.1, 0.0], vec![0.0, 0.4, 0.3]], 2));
        let cfg = SessionTrainConfig {
            steps: 30,
            learning_rate: 0.5,
            batch_size: 8,
            tau_cls: 0.125,
        };
        let a = train_session(&head, &enc, &set, &cfg, &mut SeededRng::new(3)).unwrap();
        let b = train_session(&head, &enc, &set, &cfg, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn carry_forward_contract() {
        let bank = bank_with(&[vec![1.0, 0.0], vec![0.0, 1.0]], 3);
        assert_eq!(bank.carry_forward(1, &[]).unwrap(), bank);
        let new: Vec<(u32, Vec<f64>)> = (10..15).map(|i| (i, vec![i as f64, 1.0])).collect();
        let grown = bank.carry_forward(1, &new).unwrap();
        assert_eq!(grown.class_tokens.rows(), bank.class_tokens.rows() + 5);
        assert_eq!(grown.context, bank.context);
        assert_eq!(grown.session_of_class[&12], 1);
        let stepwise = bank
            .carry_forward(1, &new[..2])
            .unwrap()
            .carry_forward(1, &new[2..])
            .unwrap();
        assert_eq!(stepwise, grown);
        assert!(matches!(
            grown.carry_forward(2, &new[..1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        let bank = bank_with(&[vec![1.0, 0.0], vec![0.0, 1.0]], 4);
        let more = bank
            .carry_forward(1, &[(7, vec![0.5, 0.5]), (8, vec![0.1, 0.9])])
            .unwrap();
        assert_eq!(bank.param_count(), 4 * 2);
        assert_eq!(more.param_count(), 4 * 2);
        let lc = LinearHead::new(16).carry_forward(&[1, 2, 3]).unwrap();
        assert_eq!(lc.param_count(), 3 * 17);
    }

    #[test]
    fn snapshots_round_trip() {
        let mut bank = bank_with(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        bank.context.set(1, 1, 0.25);
        for head in [
            Head::Prompt(bank),
            Head::Linear(LinearHead::new(3).carry_forward(&[4, 5]).unwrap()),
        ] {
            let text = head.to_snapshot().to_text();
            assert_eq!(
                Head::from_snapshot(&Snapshot::parse(&text).unwrap()).unwrap(),
                head
            );
        }
    }
}
