//! Label-free image synthesis against a frozen model.
//!
//! Noise images are optimized so their batch statistics at every batch-norm
//! layer match the stored running statistics, regularized by a total
//! variation prior and an l2 penalty. Gradients flow onto the pixels only;
//! model parameters and running statistics stay bitwise untouched (the
//! model runs in synthesis mode: normalize by running stats, never update
//! them, but expose batch statistics to the loss).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExecOptions, NetworkGraph};
use crate::hash::tensor_map_hash;
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DFDS_MAGIC: &[u8; 4] = b"DFDS";
pub const DFDS_VERSION: u32 = 1;

fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}

/// Synthesis settings. Defaults follow the toolkit's standard recipe:
/// 1600 images, 32x32 pixels, SGD on pixels with momentum 0.9.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub batch_size: usize,
    /// M, the synthetic dataset size.
    pub num_images: usize,
    /// Pixel-optimizer steps per batch.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha_bn: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub seed: u64,
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 32,
            height: 32,
            batch_size: 64,
            num_images: 1600,
            steps: 1000,
            lr: 0.05,
            momentum: 0.9,
            alpha_bn: 1.0,
            alpha_tv: 1e-2,
            alpha_l2: 1e-4,
            seed: 0,
            clamp: [0.0, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::config("synth: num_images must be positive".to_string()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("synth: image size must be at least 2x2".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("synth: batch_size must be positive".to_string()));
        }
        if self.alpha_bn < 0.0 || self.alpha_tv < 0.0 || self.alpha_l2 < 0.0 {
            return Err(Error::config("synth: loss weights must be non-negative".to_string()));
        }
        if self.clamp[1] <= self.clamp[0] {
            return Err(Error::config("synth: clamp range must be non-empty".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr <= 0.0 {
            return Err(Error::config("synth: pixel optimizer needs lr > 0, momentum in [0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Loss term values from one synthesis forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ImageLossTerms<T> {
    pub total: T,
    pub bn: T,
    pub tv: T,
    pub reg: T,
}

struct LossVars {
    total: Var,
    bn: Var,
    tv: Var,
    reg: Var,
}

fn build_image_loss<T: Scalar>(
    model: &NetworkGraph<T>,
    batch: &Tensor<T>,
    cfg: &SynthConfig,
    grad_pixels: bool,
) -> Result<(crate::graph::Execution<T>, LossVars)> {
    let mut opts = ExecOptions::synthesis();
    opts.grad_input = grad_pixels;
    let mut exec = model.forward(batch, &opts)?;
    if exec.bn_stat_losses.is_empty() {
        return Err(Error::graph(
            "image_loss: model has no batch-norm layer, the statistics loss is undefined".to_string(),
        ));
    }

    let shape = batch.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);

    let mut bn_total = exec.bn_stat_losses[0].1;
    for &(_, term) in &exec.bn_stat_losses[1..] {
        bn_total = exec.tape.add(bn_total, term)?;
    }
    let tv = exec.tape.tv_loss(exec.input)?;
    let sq = exec.tape.sq_l2_norm(exec.input);
    let reg = exec.tape.scale(sq, T::one() / T::from_usize(b * c * h * w));

    let bn_w = exec.tape.scale(bn_total, T::from_f64(cfg.alpha_bn));
    let tv_w = exec.tape.scale(tv, T::from_f64(cfg.alpha_tv));
    let reg_w = exec.tape.scale(reg, T::from_f64(cfg.alpha_l2));
    let partial = exec.tape.add(bn_w, tv_w)?;
    let total = exec.tape.add(partial, reg_w)?;

    Ok((exec, LossVars { total, bn: bn_total, tv, reg }))
}

/// The synthesis objective on one pixel batch:
/// alpha_bn * L_BN + alpha_tv * L_TV + alpha_l2 * L_reg.
/// Head layers are never executed.
pub fn image_loss<T: Scalar>(model: &NetworkGraph<T>, batch: &Tensor<T>, cfg: &SynthConfig) -> Result<ImageLossTerms<T>> {
    let (exec, vars) = build_image_loss(model, batch, cfg, false)?;
    Ok(ImageLossTerms {
        total: exec.tape.scalar(vars.total),
        bn: exec.tape.scalar(vars.bn),
        tv: exec.tape.scalar(vars.tv),
        reg: exec.tape.scalar(vars.reg),
    })
}

fn check_terms_finite<T: Scalar>(terms: &ImageLossTerms<T>) -> Result<()> {
    for (name, v) in [("bn", terms.bn), ("tv", terms.tv), ("l2", terms.reg), ("total", terms.total)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("image synthesis diverged: loss term '{name}' is not finite")));
        }
    }
    Ok(())
}

/// Seeded pixel initialization: Gaussian with mean at the range midpoint
/// and standard deviation 0.2 * range, clamped into the range.
pub fn init_pixels<T: Scalar>(batch: usize, cfg: &SynthConfig, seed: u64) -> Tensor<T> {
    let (lo, hi) = (cfg.clamp[0], cfg.clamp[1]);
    let range = hi - lo;
    let mut rng = rng_from_seed(seed);
    let mut t = Tensor::randn(
        vec![batch, 3, cfg.height, cfg.width],
        T::from_f64(lo + 0.5 * range),
        T::from_f64(0.2 * range),
        &mut rng,
    );
    let (lo_t, hi_t) = (T::from_f64(lo), T::from_f64(hi));
    for v in t.data_mut() {
        *v = (*v).max(lo_t).min(hi_t);
    }
    t
}

/// Optimize one batch of `count` noise images for `cfg.steps` steps of
/// gradient descent with momentum on the pixels, clamping after each step.
/// Returns (pixels, initial loss, final loss).
pub fn synthesize_batch<T: Scalar>(
    model: &NetworkGraph<T>,
    cfg: &SynthConfig,
    count: usize,
    seed: u64,
) -> Result<(Tensor<T>, f64, f64)> {
    cfg.validate()?;
    let mut pixels = init_pixels::<T>(count, cfg, seed);
    let mut velocity = vec![T::zero(); pixels.numel()];
    let (lo, hi) = (T::from_f64(cfg.clamp[0]), T::from_f64(cfg.clamp[1]));
    let (lr, momentum) = (T::from_f64(cfg.lr), T::from_f64(cfg.momentum));

    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    for _step in 0..cfg.steps {
        let (mut exec, vars) = build_image_loss(model, &pixels, cfg, true)?;
        let terms = ImageLossTerms {
            total: exec.tape.scalar(vars.total),
            bn: exec.tape.scalar(vars.bn),
            tv: exec.tape.scalar(vars.tv),
            reg: exec.tape.scalar(vars.reg),
        };
        check_terms_finite(&terms)?;
        if initial.is_nan() {
            initial = terms.total.to_f64x();
        }
        last = terms.total.to_f64x();
        exec.tape.backward(vars.total)?;
        let grad = exec
            .input_grad()
            .ok_or_else(|| Error::numeric("image synthesis produced no pixel gradient".to_string()))?;
        for ((p, v), &g) in pixels.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + g;
            *p = (*p - lr * *v).max(lo).min(hi);
        }
    }
    if cfg.steps == 0 {
        let terms = image_loss(model, &pixels, cfg)?;
        initial = terms.total.to_f64x();
        last = initial;
    }
    Ok((pixels, initial, last))
}

/// Provenance header of a DFDS container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DfdsHeader {
    pub model_hash: Option<String>,
    pub synth: Option<SynthConfig>,
    pub has_labels: bool,
}

/// The label-free synthetic dataset D, plus provenance.
#[derive(Debug, Clone)]
pub struct SynthDataset<T> {
    /// M images, each [3, h, w].
    pub images: Vec<Tensor<T>>,
    pub header: DfdsHeader,
}

impl<T: Scalar> SynthDataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// True when the stored provenance hash matches this model.
    pub fn matches_model(&self, model: &NetworkGraph<T>) -> bool {
        self.header.model_hash.as_deref() == Some(tensor_map_hash(model.params()).as_str())
    }
}

/// Synthesize the full dataset: ceil(M / B) independent batches with
/// derived sub-seeds, run on parallel workers, ordered by batch index.
pub fn generate_dataset<T: Scalar>(model: &NetworkGraph<T>, cfg: &SynthConfig) -> Result<SynthDataset<T>> {
    cfg.validate()?;
    let m = cfg.num_images;
    let b = cfg.batch_size;
    let n_batches = m.div_ceil(b);

    let batches: Vec<(Tensor<T>, f64, f64)> = (0..n_batches)
        .into_par_iter()
        .map(|i| {
            let count = if (i + 1) * b <= m { b } else { m - i * b };
            let seed = derive_seed_indexed(cfg.seed, "synth-batch", i as u64);
            synthesize_batch(model, cfg, count, seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let per = 3 * cfg.height * cfg.width;
    let mut images = Vec::with_capacity(m);
    for (batch, _, _) in &batches {
        let count = batch.shape()[0];
        for i in 0..count {
            let data = batch.data()[i * per..(i + 1) * per].to_vec();
            images.push(Tensor::from_vec(vec![3, cfg.height, cfg.width], data)?);
        }
    }

    Ok(SynthDataset {
        images,
        header: DfdsHeader {
            model_hash: Some(tensor_map_hash(model.params())),
            synth: Some(cfg.clone()),
            has_labels: false,
        },
    })
}

/// Write a DFDS container. Labels, when given, are appended as one u8 per
/// image after the pixel payload and flagged in the header.
pub fn write_dfds<T: Scalar>(
    path: &Path,
    images: &[Tensor<T>],
    header: &DfdsHeader,
    labels: Option<&[usize]>,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::data("refusing to write an empty dataset".to_string()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("DFDS images must be [3, h, w], got {shape:?}")));
    }
    if images.iter().any(|i| i.shape() != shape) {
        return Err(Error::shape("DFDS images must share one shape".to_string()));
    }
    match (header.has_labels, labels) {
        (true, Some(l)) if l.len() != images.len() => {
            return Err(Error::data("label count does not match image count".to_string()))
        }
        (true, None) => return Err(Error::data("header flags labels but none were given".to_string())),
        (false, Some(_)) => return Err(Error::data("labels given but header does not flag them".to_string())),
        _ => {}
    }
    let (h, w) = (shape[1], shape[2]);
    let header_json = serde_json::to_vec(header)?;

    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(DFDS_MAGIC)?;
    out.write_all(&DFDS_VERSION.to_le_bytes())?;
    out.write_all(&(images.len() as u32).to_le_bytes())?;
    out.write_all(&3u32.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for img in images {
        for &v in img.data() {
            out.write_all(&(v.to_f64x() as f32).to_le_bytes())?;
        }
    }
    if let Some(labels) = labels {
        for &l in labels {
            if l > u8::MAX as usize {
                return Err(Error::data(format!("label {l} does not fit the u8 label block")));
            }
            out.write_all(&[l as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a DFDS container; labels come back when the header flags them.
pub fn read_dfds<T: Scalar>(path: &Path) -> Result<(SynthDataset<T>, Option<Vec<usize>>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: file too short for magic", path.display())))?;
    if &magic != DFDS_MAGIC {
        return Err(Error::format(format!(
            "{}: magic mismatch (expected \"DFDS\", found {:?})",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != DFDS_VERSION {
        return Err(Error::format(format!(
            "{}: unknown format version {version} (supported: {DFDS_VERSION})",
            path.display()
        )));
    }
    let m = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    if c != 3 {
        return Err(Error::format(format!("{}: expected 3 channels, found {c}", path.display())));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    let header: DfdsHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("{}: invalid header JSON: {e}", path.display())))?;

    let per = c * h * w;
    let mut pixel_bytes = vec![0u8; m * per * 4];
    r.read_exact(&mut pixel_bytes)
        .map_err(|_| Error::format(format!("{}: truncated pixel payload", path.display())))?;
    let mut images = Vec::with_capacity(m);
    for i in 0..m {
        let data: Vec<T> = pixel_bytes[i * per * 4..(i + 1) * per * 4]
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        images.push(Tensor::from_vec(vec![3, h, w], data)?);
    }

    let labels = if header.has_labels {
        let mut label_bytes = vec![0u8; m];
        r.read_exact(&mut label_bytes)
            .map_err(|_| Error::format(format!("{}: truncated label block", path.display())))?;
        Some(label_bytes.into_iter().map(|b| b as usize).collect())
    } else {
        None
    };

    Ok((SynthDataset { images, header }, labels))
}
