//! One-hidden-layer tanh encoders with unit-norm outputs.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{norm, normalize_backward, Matrix, SeededRng, EPSILON_NORM};
use crate::snapshot::Snapshot;

const BIAS_INIT: f64 = 0.01;

/// `x ↦ W2ᵀ tanh(W1ᵀ x + b1) + b2`, optionally projected onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub normalize_output: bool,
}

/// Parameter gradients of an [`MlpEncoder`], same layout as the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        Self {
            w1: Matrix::zeros(enc.w1.rows(), enc.w1.cols()),
            b1: vec![0.0; enc.b1.len()],
            w2: Matrix::zeros(enc.w2.rows(), enc.w2.cols()),
            b2: vec![0.0; enc.b2.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len(),
        );
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: Matrix,
    pub pre_output: Matrix,
    pub output: Matrix,
    pub pre_norms: Vec<f64>,
}

impl MlpEncoder {
    /// Unit-norm encoder with weights drawn from `N(0, 1/√fan_in)`.
    pub fn init(d_in: usize, d_hidden: usize, d_emb: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::init_network(d_in, d_hidden, d_emb, true, rng)
    }

    pub fn init_network(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        normalize_output: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be at least 1, got {d_in}/{d_hidden}/{d_out}"
            )));
        }
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_hidden as f64).sqrt();
        let w1: Vec<f64> = rng
            .normal_vec(d_in * d_hidden)
            .into_iter()
            .map(|x| x * s1)
            .collect();
        let w2: Vec<f64> = rng
            .normal_vec(d_hidden * d_out)
            .into_iter()
            .map(|x| x * s2)
            .collect();
        Ok(Self {
            w1: Matrix::new(d_in, d_hidden, w1)?,
            b1: vec![BIAS_INIT; d_hidden],
            w2: Matrix::new(d_hidden, d_out, w2)?,
            b2: vec![BIAS_INIT; d_out],
            normalize_output,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|x| x.is_finite())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.d_in() {
            return Err(shape_err(format!(
                "encoder expects {} input columns, got {}",
                self.d_in(),
                batch.cols()
            )));
        }
        let mut hidden = batch.matmul(&self.w1)?;
        for i in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(i).iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
        }
        let mut pre_output = hidden.matmul(&self.w2)?;
        for i in 0..pre_output.rows() {
            for (z, b) in pre_output.row_mut(i).iter_mut().zip(&self.b2) {
                *z += b;
            }
        }
        let mut output = pre_output.clone();
        let mut pre_norms = vec![1.0; pre_output.rows()];
        if self.normalize_output {
            for (i, pn) in pre_norms.iter_mut().enumerate() {
                let n = norm(pre_output.row(i));
                if !(n > EPSILON_NORM) {
                    return Err(Error::DegenerateVector { norm: n });
                }
                *pn = n;
                output.row_mut(i).iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(ForwardCache {
            hidden,
            pre_output,
            output,
            pre_norms,
        })
    }

    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.output)
    }

    /// Exact gradients of `Σ upstream ⊙ encode(batch)` with respect to the
    /// parameters and to the batch.
    pub fn backward(&self, batch: &Matrix, upstream: &Matrix) -> Result<(EncoderGrads, Matrix)> {
        let cache = self.forward(batch)?;
        self.backward_with_cache(batch, &cache, upstream)
    }

    pub fn backward_with_cache(
        &self,
        batch: &Matrix,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<(EncoderGrads, Matrix)> {
        if upstream.shape() != cache.output.shape() {
            return Err(shape_err(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let mut d_pre = upstream.clone();
        if self.normalize_output {
            for i in 0..d_pre.rows() {
                let g =
                    normalize_backward(cache.output.row(i), cache.pre_norms[i], upstream.row(i));
                d_pre.row_mut(i).copy_from_slice(&g);
            }
        }
        let mut grads = EncoderGrads::zeros_like(self);
        grads.w2 = cache.hidden.t_matmul(&d_pre)?;
        for r in d_pre.iter_rows() {
            for (b, g) in grads.b2.iter_mut().zip(r) {
                *b += g;
            }
        }
        let mut d_hidden = d_pre.matmul_t(&self.w2)?;
        for i in 0..d_hidden.rows() {
            let h = cache.hidden.row(i);
            for (d, hv) in d_hidden.row_mut(i).iter_mut().zip(h) {
                *d *= 1.0 - hv * hv;
            }
        }
        grads.w1 = batch.t_matmul(&d_hidden)?;
        for r in d_hidden.iter_rows() {
            for (b, g) in grads.b1.iter_mut().zip(r) {
                *b += g;
            }
        }
        let d_input = d_hidden.matmul_t(&self.w1)?;
        Ok((grads, d_input))
    }

    /// Plain gradient-descent step.
    pub fn apply_gradient(&mut self, grads: &EncoderGrads, learning_rate: f64) -> Result<()> {
        self.w1.axpy(-learning_rate, &grads.w1)?;
        self.w2.axpy(-learning_rate, &grads.w2)?;
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= learning_rate * g;
        }
        Ok(())
    }

    /// Parameters in the order w1, b1, w2, b2.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn with_flat_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(shape_err(format!(
                "{} parameters for an encoder with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let (a, rest) = params.split_at(self.w1.data().len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.data().len());
        out.w1.data_mut().copy_from_slice(a);
        out.b1.copy_from_slice(b);
        out.w2.data_mut().copy_from_slice(c);
        out.b2.copy_from_slice(d);
        Ok(out)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        s.insert_matrix("w1", &self.w1);
        s.insert_vector("b1", &self.b1);
        s.insert_matrix("w2", &self.w2);
        s.insert_vector("b2", &self.b2);
        s.insert_vector(
            "normalize",
            &[if self.normalize_output { 1.0 } else { 0.0 }],
        );
        s
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let enc = Self {
            w1: s.matrix("w1")?,
            b1: s.vector("b1")?,
            w2: s.matrix("w2")?,
            b2: s.vector("b2")?,
            normalize_output: s.vector("normalize")?.first().copied().unwrap_or(1.0) != 0.0,
        };
        if enc.b1.len() != enc.w1.cols()
            || enc.w2.rows() != enc.w1.cols()
            || enc.b2.len() != enc.w2.cols()
        {
            return Err(shape_err("inconsistent encoder snapshot dimensions"));
        }
        Ok(enc)
    }
}

/// Backbone size presets standing in for the small and 4x-scaled vision towers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EncoderPreset {
    #[default]
    #[serde(rename = "rn50-analog")]
    Rn50Analog,
    #[serde(rename = "rn50x4-analog")]
    Rn50x4Analog,
}

impl EncoderPreset {
    /// `(d_hidden, d_emb)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            EncoderPreset::Rn50Analog => (32, 16),
            EncoderPreset::Rn50x4Analog => (128, 64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderPreset::Rn50Analog => "rn50-analog",
            EncoderPreset::Rn50x4Analog => "rn50x4-analog",
        }
    }
}

impl fmt::Display for EncoderPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rn50-analog" | "small" => Ok(EncoderPreset::Rn50Analog),
            "rn50x4-analog" | "large" => Ok(EncoderPreset::Rn50x4Analog),
            other => Err(format!(
                "unknown encoder preset `{other}` (expected rn50-analog or rn50x4-analog)"
            )),
        }
    }
}

/// Image and text towers sharing an output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub image: MlpEncoder,
    pub text: MlpEncoder,
    pub temperature: f64,
}

impl EncoderPair {
    pub fn new(image: MlpEncoder, text: MlpEncoder, temperature: f64) -> Result<Self> {
        if image.d_out() != text.d_out() {
            return Err(shape_err(format!(
                "image embeds into {} dims, text into {}",
                image.d_out(),
                text.d_out()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            image,
            text,
            temperature,
        })
    }

    pub fn init(
        d_raw: usize,
        d_tok: usize,
        preset: EncoderPreset,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (hidden, emb) = preset.dims();
        let image = MlpEncoder::init(d_raw, hidden, emb, rng)?;
        let text = MlpEncoder::init(d_tok, hidden, emb, rng)?;
        Self::new(image, text, temperature)
    }

    pub fn d_emb(&self) -> usize {
        self.image.d_out()
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        s.insert_vector("temperature", &[self.temperature]);
        s.merge_prefixed("image", self.image.to_snapshot());
        s.merge_prefixed("text", self.text.to_snapshot());
        s
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let t = s.vector("temperature")?;
        Self::new(
            MlpEncoder::from_snapshot(&s.sub("image"))?,
            MlpEncoder::from_snapshot(&s.sub("text"))?,
            t.first().copied().unwrap_or(0.0),
        )
    }
}
