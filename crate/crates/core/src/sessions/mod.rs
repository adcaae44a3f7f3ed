//! The few-shot class-incremental protocol: contrastive pretraining, a base
//! session, then incremental N-way K-shot sessions evaluated on every class
//! seen so far.

mod metrics;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{
    render_run, sessions_from_csv, sessions_to_csv, ComparisonRow, ComparisonTable, RunMetrics,
    SessionMetrics, CSV_HEADER, TABLE_METRICS,
};

use crate::classifier::{
    cross_entropy, train_session, ClassifierKind, Head, LinearHead, PromptBank, Provenance,
    SessionTrainConfig, TrainSetView, DEFAULT_BATCH_SIZE,
};
use crate::datagen::{batch_pairs, generate_stream, LabeledSample, Stream, StreamSpec};
use crate::encoders::{EncoderPair, EncoderPreset};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};
use crate::objectives::{contrastive_loss, ContrastiveBatch, ObjectiveConfig};
use crate::replay::{
    estimate_distribution, sample_pseudo_features, synthesize_features, train_vae,
    ClassDistribution, VaeConfig, VaeModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    None,
    #[default]
    Gaussian,
    GaussianVae,
}

impl ReplayMode {
    pub fn name(self) -> &'static str {
        match self {
            ReplayMode::None => "none",
            ReplayMode::Gaussian => "gaussian",
            ReplayMode::GaussianVae => "gaussian_vae",
        }
    }
}

impl fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(ReplayMode::None),
            "gaussian" => Ok(ReplayMode::Gaussian),
            "gaussian_vae" | "gaussian-vae" => Ok(ReplayMode::GaussianVae),
            other => Err(format!(
                "unknown replay mode `{other}` (expected none, gaussian or gaussian_vae)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub base_steps: usize,
    pub steps: usize,
    /// Defaults to 0.5 for the prompt head and 0.1 for the linear head.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub tau_cls: f64,
    pub prompt_length: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            base_steps: 200,
            steps: 100,
            learning_rate: None,
            batch_size: DEFAULT_BATCH_SIZE,
            tau_cls: 0.125,
            prompt_length: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    /// Pseudo-features drawn per old class each session; defaults to
    /// `min(ways * shots, 20)`.
    pub pseudo_per_class: Option<usize>,
    /// Synthesized-to-real feature ratio used by `gaussian_vae` estimation.
    pub synth_ratio: f64,
    pub vae: VaeConfig,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: ReplayMode::Gaussian,
            pseudo_per_class: None,
            synth_ratio: 1.0,
            vae: VaeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: StreamSpec,
    pub objective: ObjectiveConfig,
    pub classifier: ClassifierKind,
    pub encoder_preset: EncoderPreset,
    pub pretrain: PretrainConfig,
    pub session: SessionConfig,
    pub replay: ReplayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stream: StreamSpec::default(),
            objective: ObjectiveConfig::default(),
            classifier: ClassifierKind::Prompt,
            encoder_preset: EncoderPreset::Rn50Analog,
            pretrain: PretrainConfig::default(),
            session: SessionConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl RunConfig {
    /// Sets both the run seed and the stream seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stream.seed = seed;
        self
    }

    pub fn session_learning_rate(&self) -> f64 {
        self.session.learning_rate.unwrap_or(match self.classifier {
            ClassifierKind::Prompt => 0.5,
            ClassifierKind::Linear => 0.1,
        })
    }

    pub fn pseudo_per_class(&self) -> usize {
        self.replay
            .pseudo_per_class
            .unwrap_or_else(|| (self.stream.ways * self.stream.shots).min(20))
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.objective.validate()?;
        let counts = [
            ("pretrain.steps", self.pretrain.steps),
            ("session.base_steps", self.session.base_steps),
            ("session.steps", self.session.steps),
            ("session.batch_size", self.session.batch_size),
            ("session.prompt_length", self.session.prompt_length),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.pretrain.batch_size < 2 {
            return Err(Error::Config(
                "pretrain.batch_size must be at least 2".into(),
            ));
        }
        if !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config(
                "pretrain.learning_rate must be positive".into(),
            ));
        }
        if !(self.session_learning_rate() >= 0.0) {
            return Err(Error::Config(
                "session.learning_rate must be non-negative".into(),
            ));
        }
        if !(self.session.tau_cls > 0.0) {
            return Err(Error::Config("session.tau_cls must be positive".into()));
        }
        if self.replay.mode != ReplayMode::None {
            if self.pseudo_per_class() == 0 {
                return Err(Error::Config(
                    "replay.pseudo_per_class must be at least 1".into(),
                ));
            }
            if !(self.replay.synth_ratio >= 0.0) {
                return Err(Error::Config(
                    "replay.synth_ratio must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Short description of the variant, e.g. `rn50-analog+prompt+gaussian+infonce`.
    pub fn label(&self) -> String {
        format!(
            "{}+{}+{}+{}",
            self.encoder_preset, self.classifier, self.replay.mode, self.objective.kind
        )
    }
}

/// Independent generators for each phase of a run, derived from one seed.
struct RunRngs {
    init: SeededRng,
    pretrain: SeededRng,
    session: SeededRng,
    replay: SeededRng,
}

impl RunRngs {
    fn new(seed: u64) -> Self {
        let mut master = SeededRng::new(seed);
        Self {
            init: master.fork(),
            pretrain: master.fork(),
            session: master.fork(),
            replay: master.fork(),
        }
    }
}

fn pretrain_with(
    config: &RunConfig,
    stream: &Stream,
    rngs: &mut RunRngs,
) -> Result<(EncoderPair, Vec<f64>)> {
    let spec = &config.stream;
    let mut pair = EncoderPair::init(
        spec.d_raw,
        spec.d_tok,
        config.encoder_preset,
        config.objective.temperature,
        &mut rngs.init,
    )?;
    let pc = &config.pretrain;
    let mut trace = Vec::with_capacity(pc.steps);
    let mut batches = Vec::new().into_iter();
    for step in 0..pc.steps {
        let (raw, tok) = match batches.next() {
            Some(b) => b,
            None => {
                batches = batch_pairs(
                    &stream.pretrain_pairs,
                    &stream.classes,
                    pc.batch_size,
                    &mut rngs.pretrain,
                )?
                .into_iter();
                batches.next().ok_or_else(|| {
                    Error::Config(format!(
                        "pretrain.batch_size {} exceeds the {} pretraining pairs",
                        pc.batch_size,
                        stream.pretrain_pairs.len()
                    ))
                })?
            }
        };
        let img_cache = pair.image.forward(&raw)?;
        let txt_cache = pair.text.forward(&tok)?;
        let batch = ContrastiveBatch::new(img_cache.output.clone(), txt_cache.output.clone())?;
        let loss = contrastive_loss(&batch, &config.objective)?;
        if !loss.loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        trace.push(loss.loss);
        let (g_img, _) = pair
            .image
            .backward_with_cache(&raw, &img_cache, &loss.grad_x)?;
        let (g_txt, _) = pair
            .text
            .backward_with_cache(&tok, &txt_cache, &loss.grad_y)?;
        if !g_img.is_finite() || !g_txt.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        pair.image.apply_gradient(&g_img, pc.learning_rate)?;
        pair.text.apply_gradient(&g_txt, pc.learning_rate)?;
    }
    Ok((pair, trace))
}

/// Trains both encoders on the stream's pretraining classes; returns the
/// frozen pair and the loss at every step.
pub fn pretrain(config: &RunConfig) -> Result<(EncoderPair, Vec<f64>)> {
    config.validate()?;
    let stream = generate_stream(&config.stream)?;
    pretrain_with(config, &stream, &mut RunRngs::new(config.seed))
}

pub fn encode_samples(pair: &EncoderPair, samples: &[LabeledSample]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.raw.clone()).collect();
    pair.image.encode(&Matrix::from_rows(&rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub val_acc: f64,
    pub base_acc: f64,
    pub new_acc: Option<f64>,
}

/// Accuracy of `head` on `testset`, overall and split into base-session and
/// later classes.
pub fn evaluate(
    head: &Head,
    encoders: &EncoderPair,
    testset: &[LabeledSample],
    base_classes: &BTreeSet<u32>,
    tau_cls: f64,
) -> Result<Evaluation> {
    if testset.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let labels = head_labels(head, testset)?;
    let feats = encode_samples(encoders, testset)?;
    let pred = head.predict(&feats, &encoders.text, tau_cls)?;
    Ok(score(&pred, &labels, testset, base_classes))
}

fn score(
    pred: &[usize],
    labels: &[usize],
    testset: &[LabeledSample],
    base_classes: &BTreeSet<u32>,
) -> Evaluation {
    let (mut hit, mut base_hit, mut base_n, mut new_hit, mut new_n) = (0, 0, 0, 0, 0);
    for ((p, l), s) in pred.iter().zip(labels).zip(testset) {
        let ok = p == l;
        hit += ok as usize;
        if base_classes.contains(&s.class_id) {
            base_n += 1;
            base_hit += ok as usize;
        } else {
            new_n += 1;
            new_hit += ok as usize;
        }
    }
    let pct = |h: usize, n: usize| 100.0 * h as f64 / n as f64;
    Evaluation {
        val_acc: pct(hit, pred.len()),
        base_acc: if base_n > 0 {
            pct(base_hit, base_n)
        } else {
            0.0
        },
        new_acc: (new_n > 0).then(|| pct(new_hit, new_n)),
    }
}

fn head_labels(head: &Head, samples: &[LabeledSample]) -> Result<Vec<usize>> {
    let ids = head.class_ids();
    samples
        .iter()
        .map(|s| {
            ids.iter()
                .position(|&c| c == s.class_id)
                .ok_or_else(|| Error::Label(format!("class {} has not been seen", s.class_id)))
        })
        .collect()
}

/// Everything a run leaves behind, for snapshots and inspection.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub encoders: EncoderPair,
    pub pretrain_trace: Vec<f64>,
    pub head: Head,
    pub distributions: Vec<ClassDistribution>,
    /// Provenance counts `(real, pseudo)` of each session's training set.
    pub trainset_composition: Vec<(usize, usize)>,
    /// Head output dimension after each session.
    pub head_sizes: Vec<usize>,
}

struct SessionState<'a> {
    config: &'a RunConfig,
    encoders: &'a EncoderPair,
    train_cfg: SessionTrainConfig,
}

impl SessionState<'_> {
    fn real_view(&self, head: &Head, samples: &[LabeledSample]) -> Result<TrainSetView> {
        let feats = encode_samples(self.encoders, samples)?;
        let labels = head_labels(head, samples)?;
        TrainSetView::new(feats, labels, vec![Provenance::Real; samples.len()])
    }

    fn pseudo_view(
        &self,
        head: &Head,
        dists: &[ClassDistribution],
        rng: &mut SeededRng,
    ) -> Result<TrainSetView> {
        let n = self.config.pseudo_per_class();
        let ids = head.class_ids();
        let mut view = TrainSetView::new(Matrix::zeros(0, self.encoders.d_emb()), vec![], vec![])?;
        for d in dists {
            let label = ids
                .iter()
                .position(|&c| c == d.class_id)
                .ok_or_else(|| Error::Label(format!("stored class {} not in head", d.class_id)))?;
            let feats = sample_pseudo_features(d, n, rng)?;
            view.extend(TrainSetView::new(
                feats,
                vec![label; n],
                vec![Provenance::Pseudo; n],
            )?)?;
        }
        Ok(view)
    }

    fn distributions(
        &self,
        samples: &[LabeledSample],
        classes: &[u32],
        rng: &mut SeededRng,
    ) -> Result<Vec<ClassDistribution>> {
        let mut out = Vec::with_capacity(classes.len());
        for &id in classes {
            let own: Vec<LabeledSample> = samples
                .iter()
                .filter(|s| s.class_id == id)
                .cloned()
                .collect();
            let real = encode_samples(self.encoders, &own)?;
            let synth = match self.config.replay.mode {
                ReplayMode::GaussianVae => {
                    let n = (self.config.replay.synth_ratio * real.rows() as f64).round() as usize;
                    if n == 0 {
                        None
                    } else {
                        let vc = &self.config.replay.vae;
                        let model = VaeModel::new(real.cols(), vc, rng)?;
                        let (trained, _) =
                            train_vae(&model, &real, vc.steps, vc.learning_rate, rng)?;
                        Some(synthesize_features(&trained, n, rng)?)
                    }
                }
                _ => None,
            };
            out.push(estimate_distribution(id, &real, synth.as_ref())?);
        }
        Ok(out)
    }

    fn train_and_score(
        &self,
        head: &Head,
        trainset: &TrainSetView,
        steps: usize,
        rng: &mut SeededRng,
    ) -> Result<(Head, f64, f64)> {
        if trainset.is_empty() {
            return Err(Error::Config("session training set is empty".into()));
        }
        let cfg = SessionTrainConfig {
            steps,
            ..self.train_cfg
        };
        let (head, _) = train_session(head, &self.encoders.text, trainset, &cfg, rng)?;
        let logits = head.logits(&trainset.features, &self.encoders.text, cfg.tau_cls)?;
        let (loss, _) = cross_entropy(&logits, &trainset.labels)?;
        let correct = logits
            .iter_rows()
            .map(crate::classifier::argmax)
            .zip(&trainset.labels)
            .filter(|(p, l)| p == *l)
            .count();
        Ok((head, 100.0 * correct as f64 / trainset.len() as f64, loss))
    }
}

/// Runs the whole protocol, optionally reusing already pretrained encoders.
pub fn run_fscil_detailed(config: &RunConfig, encoders: Option<EncoderPair>) -> Result<RunOutcome> {
    config.validate()?;
    let stream = generate_stream(&config.stream)?;
    let mut rngs = RunRngs::new(config.seed);
    let (encoders, pretrain_trace) = match encoders {
        Some(e) => {
            if e.image.d_in() != config.stream.d_raw || e.text.d_in() != config.stream.d_tok {
                return Err(Error::Shape(
                    "supplied encoders do not match the stream dimensions".into(),
                ));
            }
            (e, Vec::new())
        }
        None => pretrain_with(config, &stream, &mut rngs)?,
    };
    let state = SessionState {
        config,
        encoders: &encoders,
        train_cfg: SessionTrainConfig {
            steps: config.session.steps,
            learning_rate: config.session_learning_rate(),
            batch_size: config.session.batch_size,
            tau_cls: config.session.tau_cls,
        },
    };
    let replay_on = config.replay.mode != ReplayMode::None;
    let tau = config.session.tau_cls;
    let tokens = |ids: &[u32]| -> Vec<(u32, Vec<f64>)> {
        ids.iter()
            .map(|&id| (id, stream.classes[id as usize].token_embedding.clone()))
            .collect()
    };

    let base_ids = stream.base_class_ids();
    let base_set: BTreeSet<u32> = base_ids.iter().copied().collect();
    let empty_head = match config.classifier {
        ClassifierKind::Prompt => Head::Prompt(PromptBank::new(
            config.session.prompt_length,
            config.stream.d_tok,
        )?),
        ClassifierKind::Linear => Head::Linear(LinearHead::new(encoders.d_emb())),
    };
    let mut head = empty_head.carry_forward(0, &tokens(&base_ids))?;
    let mut per_session = Vec::with_capacity(config.stream.n_sessions + 1);
    let mut composition = Vec::with_capacity(config.stream.n_sessions + 1);
    let mut head_sizes = Vec::with_capacity(config.stream.n_sessions + 1);

    let base_view = state.real_view(&head, &stream.base_train)?;
    composition.push((
        base_view.count(Provenance::Real),
        base_view.count(Provenance::Pseudo),
    ));
    let (trained, train_acc, train_loss) = state.train_and_score(
        &head,
        &base_view,
        config.session.base_steps,
        &mut rngs.session,
    )?;
    head = trained;
    let mut distributions = if replay_on {
        state.distributions(&stream.base_train, &base_ids, &mut rngs.replay)?
    } else {
        Vec::new()
    };
    let eval = evaluate(&head, &encoders, &stream.cumulative_test[0], &base_set, tau)?;
    per_session.push(session_row(0, train_acc, train_loss, eval));
    head_sizes.push(head.num_classes());

    for k in 1..=config.stream.n_sessions {
        let new_ids = stream.session_class_ids(k);
        head = head.carry_forward(k, &tokens(&new_ids))?;
        let mut view = state.real_view(&head, &stream.session_train[k - 1])?;
        if replay_on {
            view.extend(state.pseudo_view(&head, &distributions, &mut rngs.replay)?)?;
        }
        composition.push((view.count(Provenance::Real), view.count(Provenance::Pseudo)));
        let (trained, train_acc, train_loss) =
            state.train_and_score(&head, &view, config.session.steps, &mut rngs.session)?;
        head = trained;
        if replay_on {
            distributions.extend(state.distributions(
                &stream.session_train[k - 1],
                &new_ids,
                &mut rngs.replay,
            )?);
        }
        let eval = evaluate(&head, &encoders, &stream.cumulative_test[k], &base_set, tau)?;
        per_session.push(session_row(k, train_acc, train_loss, eval));
        head_sizes.push(head.num_classes());
    }

    let metrics = RunMetrics::from_sessions(config.clone(), &pretrain_trace, per_session)?;
    Ok(RunOutcome {
        metrics,
        encoders,
        pretrain_trace,
        head,
        distributions,
        trainset_composition: composition,
        head_sizes,
    })
}

fn session_row(
    session: usize,
    train_acc: f64,
    train_loss: f64,
    eval: Evaluation,
) -> SessionMetrics {
    SessionMetrics {
        session,
        train_acc,
        train_loss,
        val_acc: eval.val_acc,
        val_err: 100.0 - eval.val_acc,
        base_acc: eval.base_acc,
        new_acc: eval.new_acc,
    }
}

pub fn run_fscil(config: &RunConfig) -> Result<RunMetrics> {
    Ok(run_fscil_detailed(config, None)?.metrics)
}

/// A labelled configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// Runs every variant (concurrently; runs share nothing) and lays the
/// results out metric-major.
pub fn compare_runs(variants: &[Variant]) -> Result<(ComparisonTable, Vec<RunMetrics>)> {
    if variants.is_empty() {
        return Err(Error::Config("nothing to compare".into()));
    }
    let results: Vec<Result<RunMetrics>> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|v| scope.spawn(move || run_fscil(&v.config)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numeric("run panicked".into())))
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let labels = variants.iter().map(|v| v.label.clone()).collect();
    Ok((ComparisonTable::from_runs(labels, &runs)?, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            stream: StreamSpec {
                n_pretrain_classes: 8,
                pretrain_per_class: 8,
                n_base_classes: 4,
                n_sessions: 2,
                ways: 2,
                shots: 3,
                base_shots: 6,
                test_per_class: 5,
                ..StreamSpec::default()
            },
            pretrain: PretrainConfig {
                steps: 30,
                batch_size: 16,
                learning_rate: 0.5,
            },
            session: SessionConfig {
                base_steps: 40,
                steps: 20,
                ..SessionConfig::default()
            },
            ..RunConfig::default()
        }
        .with_seed(3)
    }

    #[test]
    fn evaluation_counts() {
        let mut rng = SeededRng::new(0);
        let pair = EncoderPair::init(4, 4, EncoderPreset::Rn50Analog, 0.1, &mut rng).unwrap();
        let head = Head::Linear(
            LinearHead::new(pair.d_emb())
                .carry_forward(&[0, 1, 2, 3])
                .unwrap(),
        );
        // Zero weights and biases: every logit ties and argmax falls on index 0.
        let test: Vec<LabeledSample> = (0..4)
            .flat_map(|c| {
                (0..3).map(move |i| LabeledSample {
                    raw: vec![1.0, i as f64, c as f64, 0.5],
                    class_id: c,
                })
            })
            .collect();
        let base: BTreeSet<u32> = [0, 1, 2, 3].into_iter().collect();
        let e = evaluate(&head, &pair, &test, &base, 0.1).unwrap();
        assert_eq!(e.val_acc, 25.0);
        assert_eq!(e.new_acc, None);
        let unseen = vec![LabeledSample {
            raw: vec![0.0, 0.0, 0.0, 1.0],
            class_id: 9,
        }];
        assert!(matches!(
            evaluate(&head, &pair, &unseen, &base, 0.1),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn tiny_run_schema() {
        let cfg = tiny_config();
        let out = run_fscil_detailed(&cfg, None).unwrap();
        let m = &out.metrics;
        assert_eq!(m.per_session.len(), 3);
        assert_eq!(out.pretrain_trace.len(), 30);
        assert_eq!(out.head.num_classes(), 8);
        for s in &m.per_session {
            assert!((s.val_err - (100.0 - s.val_acc)).abs() < 1e-9);
            for v in [s.train_acc, s.val_acc, s.val_err, s.base_acc] {
                assert!((0.0..=100.0).contains(&v));
            }
        }
        assert!(m.per_session[0].new_acc.is_none());
        assert!(m.per_session[1].new_acc.is_some());
        let mean = m.per_session.iter().map(|s| s.val_acc).sum::<f64>() / 3.0;
        assert!((m.average_val_acc - mean).abs() < 1e-9);
        assert_eq!(
            m.forgetting,
            m.per_session[0].base_acc - m.per_session[2].base_acc
        );
        // Old classes enter later sessions only as pseudo-features.
        assert_eq!(out.trainset_composition[0], (24, 0));
        assert_eq!(out.trainset_composition[1], (6, 4 * 6));
        assert_eq!(out.trainset_composition[2], (6, 6 * 6));
    }

    #[test]
    fn no_replay_trains_on_new_classes_only() {
        let mut cfg = tiny_config();
        cfg.replay.mode = ReplayMode::None;
        let out = run_fscil_detailed(&cfg, None).unwrap();
        assert_eq!(out.trainset_composition[1], (6, 0));
        assert!(out.distributions.is_empty());
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = tiny_config();
        let a = run_fscil(&cfg).unwrap().to_json().unwrap();
        let b = run_fscil(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_round_trip() {
        let m = run_fscil(&tiny_config()).unwrap();
        let back = RunMetrics::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.to_csv().unwrap(), m.to_csv().unwrap());
        assert_eq!(
            sessions_from_csv(&m.to_csv().unwrap()).unwrap(),
            m.per_session
        );
    }

    #[test]
    fn comparison_layout() {
        let base = tiny_config();
        let mut cloob = base.clone();
        cloob.objective.kind = crate::objectives::ObjectiveKind::Cloob;
        let variants = vec![
            Variant {
                label: "rn50-analog+infonce".into(),
                config: base,
            },
            Variant {
                label: "rn50-analog+cloob".into(),
                config: cloob,
            },
        ];
        let (table, runs) = compare_runs(&variants).unwrap();
        assert_eq!(runs.len(), 2);
        let csv = table.to_csv().unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "metric,session,rn50-analog+infonce,rn50-analog+cloob"
        );
        let metrics: Vec<&str> = table.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(metrics.len(), 4 * 3);
        assert_eq!(&metrics[0..3], ["Train Accuracy"; 3]);
        assert_eq!(&metrics[3..6], ["Train Loss"; 3]);
        assert_eq!(&metrics[6..9], ["Validation Accuracy"; 3]);
        assert_eq!(&metrics[9..12], ["Validation Error rate"; 3]);
    }
}
