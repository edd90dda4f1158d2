//! Conditional VAE over flattened images.
//!
//! Encoder `Q(z | x, y)`: `[x ; onehot(y)] -> hidden -> [mu ; log_var]`.
//! Decoder `G(z, y)`: `[z ; onehot(y)] -> hidden -> pixel logits`, with a
//! logistic output when generating. Training minimizes per-pixel binary
//! cross-entropy summed over pixels plus the closed-form Gaussian KL to N(0, I),
//! both averaged over the batch.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, LabeledSet, SourceTag};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, AdamConfig, Checkpoint, Gradients, LayerSpec, Sequential, Shape3};
use crate::seed::{self, Rng};

/// Half-width of the out-of-distribution latent box.
pub const OOD_LATENT_BOUND: f32 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self { latent_dim: 2, hidden: 512, epochs: 100, batch_size: 256, seed: 0, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeEpoch {
    pub epoch: usize,
    pub loss: CvaeLoss,
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    image_shape: Shape3,
    num_classes: usize,
    latent_dim: usize,
    encoder: Sequential,
    decoder: Sequential,
}

/// `0.5 * sum_j (mu_j^2 + exp(log_var_j) - 1 - log_var_j)` per row.
pub fn gaussian_kl(mu: ArrayView2<'_, f32>, log_var: ArrayView2<'_, f32>) -> Array1<f64> {
    mu.rows()
        .into_iter()
        .zip(log_var.rows())
        .map(|(m, lv)| {
            m.iter()
                .zip(lv.iter())
                .map(|(&m, &lv)| {
                    let (m, lv) = (f64::from(m), f64::from(lv));
                    0.5 * (m * m + lv.exp() - 1.0 - lv)
                })
                .sum()
        })
        .collect()
}

fn one_hot(labels: &[usize], k: usize) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::argument(format!("label {l} out of range for {k} classes")));
        }
        out[[i, l]] = 1.0;
    }
    Ok(out)
}

/// Numerically stable `-[x ln s(l) + (1 - x) ln(1 - s(l))]`.
fn bce_with_logit(l: f32, x: f32) -> f64 {
    let l = f64::from(l);
    l.max(0.0) - f64::from(x) * l + (-l.abs()).exp().ln_1p()
}

impl CvaeModel {
    pub fn new(image_shape: Shape3, num_classes: usize, latent_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::argument("latent_dim, hidden and num_classes must be positive"));
        }
        let (h, w, c) = image_shape;
        let p = h * w * c;
        let mut rng = seed::rng_for(seed, "cvae-init");
        let encoder = Sequential::new(
            vec![
                LayerSpec::Dense { inputs: p + num_classes, outputs: hidden },
                LayerSpec::Relu { width: hidden },
                LayerSpec::Dense { inputs: hidden, outputs: 2 * latent_dim },
            ],
            &mut rng,
        )?;
        let decoder = Sequential::new(
            vec![
                LayerSpec::Dense { inputs: latent_dim + num_classes, outputs: hidden },
                LayerSpec::Relu { width: hidden },
                LayerSpec::Dense { inputs: hidden, outputs: p },
            ],
            &mut rng,
        )?;
        Ok(Self { image_shape, num_classes, latent_dim, encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Shape3 {
        self.image_shape
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Sequential {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Sequential {
        &mut self.decoder
    }

    /// `(mu, log_var)`, each `[batch, d]`.
    pub fn encode(&self, x: ArrayView2<'_, f32>, labels: &[usize]) -> Result<(Array2<f32>, Array2<f32>)> {
        let input = concatenate![Axis(1), x, one_hot(labels, self.num_classes)?];
        let out = self.encoder.forward(input.view());
        let d = self.latent_dim;
        Ok((out.slice(s![.., ..d]).to_owned(), out.slice(s![.., d..]).to_owned()))
    }

    /// Decoded images as flat rows in `[0, 1]`.
    pub fn decode(&self, z: ArrayView2<'_, f32>, labels: &[usize]) -> Result<Array2<f32>> {
        if z.ncols() != self.latent_dim || z.nrows() != labels.len() {
            return Err(Error::consistency(format!(
                "latents {:?} for {} labels at d = {}",
                z.dim(),
                labels.len(),
                self.latent_dim
            )));
        }
        let input = concatenate![Axis(1), z, one_hot(labels, self.num_classes)?];
        Ok(self.decoder.forward(input.view()).mapv(sigmoid))
    }

    fn check_batch(&self, batch: &LabeledSet) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::argument("CVAE batch is empty"));
        }
        if batch.images.image_shape() != self.image_shape {
            return Err(Error::argument(format!(
                "images are {:?}, CVAE expects {:?}",
                batch.images.image_shape(),
                self.image_shape
            )));
        }
        Ok(())
    }

    /// Loss and parameter gradients on one batch; `eps` is the `[batch, d]` noise.
    pub fn loss_and_grads(&self, x: ArrayView2<'_, f32>, labels: &[usize], eps: &Array2<f32>) -> Result<(CvaeLoss, Gradients, Gradients)> {
        let b = x.nrows();
        let d = self.latent_dim;
        let y = one_hot(labels, self.num_classes)?;
        let enc_in = concatenate![Axis(1), x, y];
        let (enc_out, enc_tape) = self.encoder.forward_train(enc_in.view());
        let mu = enc_out.slice(s![.., ..d]);
        let lv = enc_out.slice(s![.., d..]);
        let std = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * eps);
        let dec_in = concatenate![Axis(1), z, y];
        let (logits, dec_tape) = self.decoder.forward_train(dec_in.view());

        let recon: f64 = logits.iter().zip(x.iter()).map(|(&l, &t)| bce_with_logit(l, t)).sum::<f64>() / b as f64;
        let kl = gaussian_kl(mu, lv).sum() / b as f64;

        let inv_b = 1.0 / b as f32;
        let mut g_logits = logits.mapv(sigmoid);
        g_logits.zip_mut_with(&x, |g, &t| *g = (*g - t) * inv_b);
        let (g_dec_in, dec_grads) = self.decoder.backward(dec_tape, g_logits, true);
        let g_z = g_dec_in.expect("requested").slice_move(s![.., ..d]);

        let mut g_enc = Array2::<f32>::zeros((b, 2 * d));
        {
            let (mut g_mu, mut g_lv) = g_enc.view_mut().split_at(Axis(1), d);
            g_mu.assign(&(&g_z + &(&mu * inv_b)));
            let exp_lv = lv.mapv(f32::exp);
            g_lv.assign(&(&(&g_z * eps) * &std * 0.5 + &((exp_lv - 1.0) * (0.5 * inv_b))));
        }
        let (_, enc_grads) = self.encoder.backward(enc_tape, g_enc, false);
        Ok((CvaeLoss { total: recon + kl, recon, kl }, enc_grads, dec_grads))
    }

    pub fn to_checkpoint(&self, config_echo: Option<&serde_json::Value>) -> Checkpoint {
        let mut c = Checkpoint::new("cvae");
        c.set_meta("image_shape", serde_json::to_string(&self.image_shape).expect("shape"));
        c.set_meta("num_classes", self.num_classes.to_string());
        c.set_meta("latent_dim", self.latent_dim.to_string());
        c.set_meta("encoder_layers", serde_json::to_string(self.encoder.specs()).expect("specs"));
        c.set_meta("decoder_layers", serde_json::to_string(self.decoder.specs()).expect("specs"));
        if let Some(cfg) = config_echo {
            c.set_meta("config", cfg.to_string());
        }
        self.encoder.write_to(&mut c, "encoder.");
        self.decoder.write_to(&mut c, "decoder.");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != Some("cvae") {
            return Err(Error::consistency(format!("checkpoint kind {:?} is not a cvae", c.kind())));
        }
        let bad = |e: serde_json::Error| Error::consistency(format!("checkpoint metadata: {e}"));
        let int = |key: &str| -> Result<usize> {
            c.meta(key)?.parse().map_err(|_| Error::consistency(format!("{key} is not an integer")))
        };
        let image_shape: Shape3 = serde_json::from_str(c.meta("image_shape")?).map_err(bad)?;
        let enc: Vec<LayerSpec> = serde_json::from_str(c.meta("encoder_layers")?).map_err(bad)?;
        let dec: Vec<LayerSpec> = serde_json::from_str(c.meta("decoder_layers")?).map_err(bad)?;
        Ok(Self {
            image_shape,
            num_classes: int("num_classes")?,
            latent_dim: int("latent_dim")?,
            encoder: Sequential::read_from(c, "encoder.", enc)?,
            decoder: Sequential::read_from(c, "decoder.", dec)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_echo: Option<&serde_json::Value>) -> Result<()> {
        self.to_checkpoint(config_echo).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Negated lower bound on one batch, with reparameterization noise drawn from `seed`.
pub fn cvae_loss(model: &CvaeModel, batch: &LabeledSet, seed: u64) -> Result<CvaeLoss> {
    model.check_batch(batch)?;
    let eps = standard_normal(batch.len(), model.latent_dim, &mut seed::rng_for(seed, "cvae-eps"));
    Ok(model.loss_and_grads(batch.images.rows(), &batch.labels, &eps)?.0)
}

/// Trains a fresh CVAE on teacher-labeled originals. The returned curve starts
/// with the untrained loss at epoch 0.
pub fn train_cvae(d_set: &LabeledSet, num_classes: usize, config: &CvaeConfig) -> Result<(CvaeModel, Vec<CvaeEpoch>)> {
    if config.batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    let mut model =
        CvaeModel::new(d_set.images.image_shape(), num_classes, config.latent_dim, config.hidden, config.seed)?;
    model.check_batch(d_set)?;
    let mut curve = vec![CvaeEpoch { epoch: 0, loss: cvae_loss(&model, d_set, config.seed)? }];
    let mut enc_opt = Adam::new(config.adam, &model.encoder);
    let mut dec_opt = Adam::new(config.adam, &model.decoder);
    let mut shuffle_rng = seed::rng_for(config.seed, "cvae-shuffle");
    let mut eps_rng = seed::rng_for(config.seed, "cvae-train-eps");
    let mut order: Vec<usize> = (0..d_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut tot, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch = d_set.select(chunk)?;
            let eps = standard_normal(chunk.len(), model.latent_dim, &mut eps_rng);
            let (loss, ge, gd) = model.loss_and_grads(batch.images.rows(), &batch.labels, &eps)?;
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    msg: format!("CVAE loss {} (recon {}, kl {})", loss.total, loss.recon, loss.kl),
                });
            }
            enc_opt.step(&mut model.encoder, &ge);
            dec_opt.step(&mut model.decoder, &gd);
            let w = chunk.len() as f64;
            tot += loss.total * w;
            rec += loss.recon * w;
            kl += loss.kl * w;
            step += 1;
        }
        let n = d_set.len() as f64;
        let loss = CvaeLoss { total: tot / n, recon: rec / n, kl: kl / n };
        log::debug!("cvae epoch {epoch}: total {:.3} recon {:.3} kl {:.3}", loss.total, loss.recon, loss.kl);
        curve.push(CvaeEpoch { epoch, loss });
    }
    Ok((model, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    PriorNormal,
    UniformOod,
}

/// Latent codes for CVAE generation, normal rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f32>,
    pub origin: Vec<LatentOrigin>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn concat(a: &LatentBatch, b: &LatentBatch) -> Result<Self> {
        let z = concatenate(Axis(0), &[a.z.view(), b.z.view()]).map_err(|e| Error::consistency(e.to_string()))?;
        Ok(Self { z, origin: a.origin.iter().chain(&b.origin).copied().collect() })
    }
}

/// `count` rows from N(0, I_d). Streams are prefix-stable in `count`.
pub fn sample_normal_latents(count: usize, d: usize, seed: u64) -> LatentBatch {
    let mut rng = seed::rng_for(seed, "latents-normal");
    LatentBatch { z: standard_normal(count, d, &mut rng), origin: vec![LatentOrigin::PriorNormal; count] }
}

/// `count` rows from U([-3, 3]^d). Streams are prefix-stable in `count`.
pub fn sample_uniform_latents(count: usize, d: usize, seed: u64) -> LatentBatch {
    let mut rng = seed::rng_for(seed, "latents-uniform");
    let dist = Uniform::new_inclusive(-OOD_LATENT_BOUND, OOD_LATENT_BOUND).expect("finite bounds");
    LatentBatch {
        z: Array2::from_shape_simple_fn((count, d), || dist.sample(&mut rng)),
        origin: vec![LatentOrigin::UniformOod; count],
    }
}

/// `ceil(m2 / 2)` prior rows followed by `floor(m2 / 2)` uniform-box rows.
pub fn sample_latents(m2: usize, d: usize, seed: u64) -> LatentBatch {
    let normal = sample_normal_latents(m2.div_ceil(2), d, seed);
    let uniform = sample_uniform_latents(m2 / 2, d, seed);
    LatentBatch::concat(&normal, &uniform).expect("same width")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPlan {
    pub y_cvae: Vec<usize>,
}

impl LabelPlan {
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &y in &self.y_cvae {
            c[y] += 1;
        }
        c
    }
}

/// Class ids for `m2` generated images, each class used `floor(m2/k)` or
/// `ceil(m2/k)` times. Which classes take the remainder and the final order are
/// both drawn from `seed`.
pub fn plan_balanced_labels(m2: usize, k: usize, seed: u64) -> Result<LabelPlan> {
    if k == 0 {
        return Err(Error::argument("need at least one class"));
    }
    let mut rng = seed::rng_for(seed, "label-plan");
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let (base, rem) = (m2 / k, m2 % k);
    let mut y: Vec<usize> = Vec::with_capacity(m2);
    for (rank, &c) in classes.iter().enumerate() {
        let n = base + usize::from(rank < rem);
        y.extend(std::iter::repeat_n(c, n));
    }
    y.shuffle(&mut rng);
    Ok(LabelPlan { y_cvae: y })
}

/// Decodes every latent row with its planned class. Prior rows are tagged
/// `cvae_wd`, uniform-box rows `cvae_ood`.
pub fn generate_cvae_images(model: &CvaeModel, latents: &LatentBatch, labels: &LabelPlan) -> Result<ImageSet> {
    if latents.len() != labels.y_cvae.len() {
        return Err(Error::consistency(format!(
            "{} latents for {} planned labels",
            latents.len(),
            labels.y_cvae.len()
        )));
    }
    if latents.z.ncols() != model.latent_dim && !latents.is_empty() {
        return Err(Error::consistency(format!("latents have d = {}, model d = {}", latents.z.ncols(), model.latent_dim)));
    }
    if latents.is_empty() {
        return Ok(ImageSet::empty(model.image_shape));
    }
    let mut rows = Array2::<f32>::zeros((latents.len(), model.decoder.output_width()));
    let chunk = 1024;
    let mut start = 0;
    while start < latents.len() {
        let end = (start + chunk).min(latents.len());
        let out = model.decode(latents.z.slice(s![start..end, ..]), &labels.y_cvae[start..end])?;
        rows.slice_mut(s![start..end, ..]).assign(&out);
        start = end;
    }
    let tags = latents
        .origin
        .iter()
        .map(|o| match o {
            LatentOrigin::PriorNormal => SourceTag::CvaeWd,
            LatentOrigin::UniformOod => SourceTag::CvaeOod,
        })
        .collect();
    ImageSet::from_rows(rows, model.image_shape, tags)
}
