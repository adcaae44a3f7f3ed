//! Old-class memory: per-class diagonal Gaussians over the embedding space,
//! a small VAE that synthesizes extra features for estimating them, and
//! seeded pseudo-feature sampling for replay.

use crate::encoders::{EncoderGrads, MlpEncoder};
use crate::error::{shape_err, Error, Result};
#[cfg(test)]
use crate::numeric::l2_normalize;
use crate::numeric::{Matrix, SeededRng};
use crate::snapshot::Snapshot;
use serde::{Deserialize, Serialize};

/// Lower bound applied to every stored variance entry.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub class_id: u32,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub n_real: usize,
    pub n_synth: usize,
}

/// `Σ_d ½(μ_d² + exp(log σ_d²) − 1 − log σ_d²)`: KL from `N(μ, σ²)` to `N(0, I)`.
pub fn kl_gauss(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() {
        return Err(shape_err(format!(
            "kl_gauss given {} means and {} log-variances",
            mu.len(),
            log_var.len()
        )));
    }
    if mu.iter().chain(log_var).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kl_gauss given a non-finite input".into()));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

/// Gradient of [`kl_gauss`]: `(μ, ½(exp(log σ²) − 1))`.
pub fn kl_gauss_grad(mu: &[f64], log_var: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        mu.to_vec(),
        log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lambda_r: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_dim: 32,
            lambda_r: 0.5,
            steps: 300,
            learning_rate: 0.1,
        }
    }
}

/// Encoder `d_emb → 2·d_z` emitting `(μ_z, log σ_z²)` and decoder `d_z → d_emb`,
/// neither normalizing its output.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: MlpEncoder,
    pub decoder: MlpEncoder,
    pub latent_dim: usize,
    pub lambda_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub recon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: EncoderGrads,
    pub decoder: EncoderGrads,
}

impl VaeGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.encoder.flat();
        v.extend(self.decoder.flat());
        v
    }
}

impl VaeModel {
    pub fn new(d_emb: usize, cfg: &VaeConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.latent_dim == 0 {
            return Err(Error::Config("vae latent_dim must be at least 1".into()));
        }
        if !(cfg.lambda_r > 0.0) {
            return Err(Error::Config(format!(
                "vae lambda_r must be positive, got {}",
                cfg.lambda_r
            )));
        }
        Ok(Self {
            encoder: MlpEncoder::init_network(
                d_emb,
                cfg.hidden_dim,
                2 * cfg.latent_dim,
                false,
                rng,
            )?,
            decoder: MlpEncoder::init_network(cfg.latent_dim, cfg.hidden_dim, d_emb, false, rng)?,
            latent_dim: cfg.latent_dim,
            lambda_r: cfg.lambda_r,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.decoder.d_out()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }

    pub fn with_flat_params(&self, params: &[f64]) -> Result<Self> {
        let n_enc = self.encoder.param_count();
        if params.len() != n_enc + self.decoder.param_count() {
            return Err(shape_err("wrong number of VAE parameters"));
        }
        let mut out = self.clone();
        out.encoder = self.encoder.with_flat_params(&params[..n_enc])?;
        out.decoder = self.decoder.with_flat_params(&params[n_enc..])?;
        Ok(out)
    }

    fn apply_gradient(&mut self, grads: &VaeGrads, learning_rate: f64) -> Result<()> {
        self.encoder.apply_gradient(&grads.encoder, learning_rate)?;
        self.decoder.apply_gradient(&grads.decoder, learning_rate)
    }
}

/// `L_VAE = L_KL + λ_r·L_r` with the reparameterization noise supplied.
///
/// `noise` holds one row of `ε` per feature.
pub fn vae_loss_with_noise(
    model: &VaeModel,
    features: &Matrix,
    noise: &Matrix,
) -> Result<(VaeLossBreakdown, VaeGrads)> {
    let (b, d) = features.shape();
    let dz = model.latent_dim;
    if b == 0 {
        return Err(Error::InsufficientData("vae loss of an empty batch".into()));
    }
    if d != model.d_emb() {
        return Err(shape_err(format!(
            "vae expects {} features, got {d}",
            model.d_emb()
        )));
    }
    if noise.shape() != (b, dz) {
        return Err(shape_err(format!(
            "noise {:?} for batch of {b} with latent {dz}",
            noise.shape()
        )));
    }
    let inv_b = 1.0 / b as f64;

    let enc_cache = model.encoder.forward(features)?;
    let stats = &enc_cache.output;
    let mut z = Matrix::zeros(b, dz);
    let mut kl = 0.0;
    for i in 0..b {
        let (mu, lv) = stats.row(i).split_at(dz);
        kl += kl_gauss(mu, lv)?;
        for (k, zk) in z.row_mut(i).iter_mut().enumerate() {
            *zk = mu[k] + (0.5 * lv[k]).exp() * noise.get(i, k);
        }
    }
    kl *= inv_b;

    let dec_cache = model.decoder.forward(&z)?;
    let recon_out = &dec_cache.output;
    let mut recon = 0.0;
    let mut d_recon = Matrix::zeros(b, d);
    let coeff = model.lambda_r * 2.0 * inv_b / d as f64;
    for i in 0..b {
        for j in 0..d {
            let diff = recon_out.get(i, j) - features.get(i, j);
            recon += diff * diff;
            d_recon.set(i, j, coeff * diff);
        }
    }
    recon *= inv_b / d as f64;

    let (dec_grads, d_z) = model
        .decoder
        .backward_with_cache(&z, &dec_cache, &d_recon)?;
    let mut d_stats = Matrix::zeros(b, 2 * dz);
    for i in 0..b {
        let (mu, lv) = stats.row(i).split_at(dz);
        let (g_mu, g_lv) = kl_gauss_grad(mu, lv);
        let row = d_stats.row_mut(i);
        for k in 0..dz {
            let sigma = (0.5 * lv[k]).exp();
            row[k] = d_z.get(i, k) + inv_b * g_mu[k];
            row[dz + k] = d_z.get(i, k) * noise.get(i, k) * 0.5 * sigma + inv_b * g_lv[k];
        }
    }
    let (enc_grads, _) = model
        .encoder
        .backward_with_cache(features, &enc_cache, &d_stats)?;

    let breakdown = VaeLossBreakdown {
        total: kl + model.lambda_r * recon,
        kl,
        recon,
    };
    Ok((
        breakdown,
        VaeGrads {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    ))
}

/// [`vae_loss_with_noise`] with `ε` drawn from `rng`.
pub fn vae_loss(
    model: &VaeModel,
    features: &Matrix,
    rng: &mut SeededRng,
) -> Result<(VaeLossBreakdown, VaeGrads)> {
    let noise = Matrix::new(
        features.rows(),
        model.latent_dim,
        rng.normal_vec(features.rows() * model.latent_dim),
    )?;
    vae_loss_with_noise(model, features, &noise)
}

/// Full-batch gradient descent on `L_VAE`; returns the trained model and the
/// loss recorded at every step (before that step's update).
pub fn train_vae(
    model: &VaeModel,
    features: &Matrix,
    steps: usize,
    learning_rate: f64,
    rng: &mut SeededRng,
) -> Result<(VaeModel, Vec<VaeLossBreakdown>)> {
    if steps == 0 {
        return Err(Error::Config("vae training needs at least one step".into()));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "vae learning rate must be positive, got {learning_rate}"
        )));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = vae_loss(&model, features, rng)?;
        if !loss.total.is_finite() || !grads.encoder.is_finite() || !grads.decoder.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        trace.push(loss);
        model.apply_gradient(&grads, learning_rate)?;
    }
    Ok((model, trace))
}

/// Decodes `n` prior samples and projects them onto the unit sphere.
pub fn synthesize_features(model: &VaeModel, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Config("cannot synthesize zero features".into()));
    }
    let z = Matrix::new(n, model.latent_dim, rng.normal_vec(n * model.latent_dim))?;
    model.decoder.encode(&z)?.normalize_rows()
}

/// Pools real and synthesized features with equal weight and fits a diagonal
/// Gaussian (population variance, floored).
pub fn estimate_distribution(
    class_id: u32,
    real: &Matrix,
    synth: Option<&Matrix>,
) -> Result<ClassDistribution> {
    if real.rows() == 0 {
        return Err(Error::InsufficientData(format!(
            "class {class_id} has no real features"
        )));
    }
    let empty = Matrix::zeros(0, real.cols());
    let synth = synth.unwrap_or(&empty);
    if synth.rows() > 0 && synth.cols() != real.cols() {
        return Err(shape_err(
            "synthesized and real features differ in dimension",
        ));
    }
    let pooled = real.vstack(synth)?;
    let mean = pooled.column_mean()?;
    let n = pooled.rows() as f64;
    let mut variance = vec![0.0; pooled.cols()];
    for r in pooled.iter_rows() {
        for ((v, x), m) in variance.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    variance
        .iter_mut()
        .for_each(|v| *v = (*v / n).max(VARIANCE_FLOOR));
    Ok(ClassDistribution {
        class_id,
        mean,
        variance,
        n_real: real.rows(),
        n_synth: synth.rows(),
    })
}

/// Rows `mean + √variance ⊙ ε`, before any projection onto the sphere.
pub fn sample_gaussian(dist: &ClassDistribution, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Config("cannot sample zero pseudo-features".into()));
    }
    let d = dist.mean.len();
    let std: Vec<f64> = dist.variance.iter().map(|v| v.sqrt()).collect();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for ((o, m), s) in out.row_mut(i).iter_mut().zip(&dist.mean).zip(&std) {
            *o = m + s * rng.next_normal();
        }
    }
    Ok(out)
}

/// Rows `normalize(mean + √variance ⊙ ε)`.
pub fn sample_pseudo_features(
    dist: &ClassDistribution,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    sample_gaussian(dist, n, rng)?.normalize_rows()
}

/// Serializes a set of distributions, one `class.<id>.*` group per class.
pub fn distributions_to_snapshot(dists: &[ClassDistribution]) -> Snapshot {
    let mut s = Snapshot::new();
    for d in dists {
        let head = format!("class.{}", d.class_id);
        s.insert_vector(format!("{head}.mean"), &d.mean);
        s.insert_vector(format!("{head}.variance"), &d.variance);
        s.insert_vector(
            format!("{head}.counts"),
            &[d.n_real as f64, d.n_synth as f64],
        );
    }
    s
}

pub fn distributions_from_snapshot(s: &Snapshot) -> Result<Vec<ClassDistribution>> {
    let mut ids: Vec<u32> = Vec::new();
    for e in s.entries() {
        let Some(rest) = e.name.strip_prefix("class.") else {
            return Err(Error::Config(format!("unexpected entry `{}`", e.name)));
        };
        let id_str = rest.split('.').next().unwrap_or("");
        let id = id_str
            .parse::<u32>()
            .map_err(|_| Error::Config(format!("bad class id in `{}`", e.name)))?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let g = s.sub(&format!("class.{id}"));
            let counts = g.vector("counts")?;
            let mean = g.vector("mean")?;
            let variance = g.vector("variance")?;
            if counts.len() != 2 || mean.len() != variance.len() {
                return Err(shape_err(format!("malformed distribution for class {id}")));
            }
            Ok(ClassDistribution {
                class_id: id,
                mean,
                variance,
                n_real: counts[0] as usize,
                n_synth: counts[1] as usize,
            })
        })
        .collect()
}
