//! Synthetic class streams standing in for image datasets.
//!
//! Every class owns a unit-norm raw prototype and a token embedding. Samples
//! are noisy copies of the prototype projected back onto the unit sphere.
//! Class ids are assigned in the order pretrain, base, incremental.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    pub class_id: u32,
    pub raw_prototype: Vec<f64>,
    pub token_embedding: Vec<f64>,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub raw: Vec<f64>,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub d_raw: usize,
    pub d_tok: usize,
    pub n_pretrain_classes: usize,
    /// Pretraining pairs generated per pretrain class.
    pub pretrain_per_class: usize,
    pub n_base_classes: usize,
    /// Incremental sessions after the base session; zero gives a base-only run.
    pub n_sessions: usize,
    pub ways: usize,
    pub shots: usize,
    pub base_shots: usize,
    pub test_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            d_raw: 16,
            d_tok: 16,
            n_pretrain_classes: 40,
            pretrain_per_class: 25,
            n_base_classes: 20,
            n_sessions: 4,
            ways: 5,
            shots: 5,
            base_shots: 20,
            test_per_class: 20,
            noise_scale: 0.25,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn n_incremental_classes(&self) -> usize {
        self.n_sessions * self.ways
    }

    pub fn n_classes(&self) -> usize {
        self.n_pretrain_classes + self.n_base_classes + self.n_incremental_classes()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_raw", self.d_raw),
            ("d_tok", self.d_tok),
            ("n_pretrain_classes", self.n_pretrain_classes),
            ("pretrain_per_class", self.pretrain_per_class),
            ("n_base_classes", self.n_base_classes),
            ("shots", self.shots),
            ("base_shots", self.base_shots),
            ("test_per_class", self.test_per_class),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("stream.{name} must be at least 1")));
            }
        }
        if self.n_sessions > 0 && self.ways < 2 {
            return Err(Error::Config(format!(
                "stream.ways must be at least 2, got {}",
                self.ways
            )));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config(format!(
                "stream.noise_scale must be positive, got {}",
                self.noise_scale
            )));
        }
        if self.n_classes() > u32::MAX as usize {
            return Err(Error::Config("too many classes".into()));
        }
        Ok(())
    }
}

/// Everything `generate_stream` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub spec: StreamSpec,
    pub classes: Vec<SyntheticClass>,
    pub pretrain_pairs: Vec<LabeledSample>,
    pub base_train: Vec<LabeledSample>,
    pub base_test: Vec<LabeledSample>,
    /// Training samples of incremental session `k + 1`.
    pub session_train: Vec<Vec<LabeledSample>>,
    /// Test samples of every class seen through session `k` (index 0 is the base session).
    pub cumulative_test: Vec<Vec<LabeledSample>>,
}

impl Stream {
    pub fn class(&self, class_id: u32) -> Option<&SyntheticClass> {
        self.classes.get(class_id as usize)
    }

    pub fn pretrain_class_ids(&self) -> Vec<u32> {
        (0..self.spec.n_pretrain_classes as u32).collect()
    }

    pub fn base_class_ids(&self) -> Vec<u32> {
        let start = self.spec.n_pretrain_classes as u32;
        (start..start + self.spec.n_base_classes as u32).collect()
    }

    /// Class ids introduced in incremental session `session` (1-based).
    pub fn session_class_ids(&self, session: usize) -> Vec<u32> {
        assert!(session >= 1 && session <= self.spec.n_sessions);
        let start = (self.spec.n_pretrain_classes
            + self.spec.n_base_classes
            + (session - 1) * self.spec.ways) as u32;
        (start..start + self.spec.ways as u32).collect()
    }
}

fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&rng.normal_vec(dim)) {
            return v;
        }
    }
}

fn draw_samples(class: &SyntheticClass, n: usize, rng: &mut SeededRng) -> Vec<LabeledSample> {
    (0..n)
        .map(|_| loop {
            let noisy: Vec<f64> = class
                .raw_prototype
                .iter()
                .map(|p| p + class.noise_scale * rng.next_normal())
                .collect();
            if let Ok(raw) = l2_normalize(&noisy) {
                break LabeledSample {
                    raw,
                    class_id: class.class_id,
                };
            }
        })
        .collect()
}

/// Builds the full class stream for `spec`.
///
/// Token embeddings come from a stream-wide random linear map applied to the
/// prototype and renormalized, so a class's token is informative about its
/// samples the way a class name is informative about its images.
pub fn generate_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let token_map = Matrix::new(
        spec.d_tok,
        spec.d_raw,
        rng.normal_vec(spec.d_tok * spec.d_raw),
    )?;

    let mut classes = Vec::with_capacity(spec.n_classes());
    for id in 0..spec.n_classes() {
        let raw_prototype = random_unit(&mut rng, spec.d_raw);
        let projected: Vec<f64> = token_map
            .iter_rows()
            .map(|r| crate::numeric::dot(r, &raw_prototype))
            .collect();
        let token_embedding = match l2_normalize(&projected) {
            Ok(t) => t,
            Err(_) => random_unit(&mut rng, spec.d_tok),
        };
        classes.push(SyntheticClass {
            class_id: id as u32,
            raw_prototype,
            token_embedding,
            noise_scale: spec.noise_scale,
        });
    }

    let mut stream = Stream {
        spec: spec.clone(),
        classes,
        pretrain_pairs: Vec::new(),
        base_train: Vec::new(),
        base_test: Vec::new(),
        session_train: Vec::new(),
        cumulative_test: Vec::new(),
    };

    for id in stream.pretrain_class_ids() {
        let c = &stream.classes[id as usize];
        stream
            .pretrain_pairs
            .extend(draw_samples(c, spec.pretrain_per_class, &mut rng));
    }
    for id in stream.base_class_ids() {
        let c = &stream.classes[id as usize];
        stream
            .base_train
            .extend(draw_samples(c, spec.base_shots, &mut rng));
    }
    for session in 1..=spec.n_sessions {
        let mut train = Vec::with_capacity(spec.ways * spec.shots);
        for id in stream.session_class_ids(session) {
            train.extend(draw_samples(
                &stream.classes[id as usize],
                spec.shots,
                &mut rng,
            ));
        }
        stream.session_train.push(train);
    }

    // Test samples are drawn once per class; session k's cumulative set is the
    // union over every class seen so far.
    for id in stream.base_class_ids() {
        let c = &stream.classes[id as usize];
        stream
            .base_test
            .extend(draw_samples(c, spec.test_per_class, &mut rng));
    }
    let mut cumulative = stream.base_test.clone();
    stream.cumulative_test.push(cumulative.clone());
    for session in 1..=spec.n_sessions {
        for id in stream.session_class_ids(session) {
            let c = &stream.classes[id as usize];
            cumulative.extend(draw_samples(c, spec.test_per_class, &mut rng));
        }
        stream.cumulative_test.push(cumulative.clone());
    }
    Ok(stream)
}

/// Shuffles `pairs` and cuts them into aligned (raw, token) batches.
///
/// Row `i` of the token matrix is the token embedding of row `i`'s class.
/// Any trailing partial batch is dropped.
pub fn batch_pairs(
    pairs: &[LabeledSample],
    classes: &[SyntheticClass],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(Matrix, Matrix)>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2 for contrastive training, got {batch_size}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to batch".into()));
    }
    let token_of = |id: u32| -> Result<&[f64]> {
        classes
            .iter()
            .find(|c| c.class_id == id)
            .map(|c| c.token_embedding.as_slice())
            .ok_or_else(|| Error::Label(format!("class {id} has no token embedding")))
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::with_capacity(pairs.len() / batch_size);
    for chunk in order.chunks_exact(batch_size) {
        let mut raw = Matrix::zeros(0, 0);
        let mut tok = Matrix::zeros(0, 0);
        for &i in chunk {
            raw.push_row(&pairs[i].raw)?;
            tok.push_row(token_of(pairs[i].class_id)?)?;
        }
        batches.push((raw, tok));
    }
    Ok(batches)
}

fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for s in samples {
        let _ = write!(out, "{}", s.class_id);
        for v in &s.raw {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses the line-delimited sample format written by [`export_stream`].
pub fn parse_samples(text: &str) -> Result<Vec<LabeledSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            let bad = |message: String| Error::Parse {
                line: i + 1,
                key: "sample".into(),
                message,
            };
            let class_id = parts
                .next()
                .unwrap_or("")
                .parse::<u32>()
                .map_err(|e| bad(format!("bad class id: {e}")))?;
            let raw = parts
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| bad(format!("bad value `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledSample { raw, class_id })
        })
        .collect()
}

/// Writes every split of `stream` into `dir`, one sample per line.
pub fn export_stream(stream: &Stream, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, samples: &[LabeledSample]| -> Result<()> {
        let path = dir.join(name);
        write_samples(&path, samples)?;
        written.push(path);
        Ok(())
    };
    emit("pretrain.txt".into(), &stream.pretrain_pairs)?;
    emit("base_train.txt".into(), &stream.base_train)?;
    emit("base_test.txt".into(), &stream.base_test)?;
    for (k, s) in stream.session_train.iter().enumerate() {
        emit(format!("session_{}_train.txt", k + 1), s)?;
    }
    if let Some(all) = stream.cumulative_test.last() {
        emit("test.txt".into(), all)?;
    }
    Ok(written)
}
