//! Training loops for the codec and the entropy model.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Codec, RunOptions};
use crate::codes::CodeTensor;
use crate::container::ModelHash;
use crate::data::{self, Patch};
use crate::entropy::{EntropyArchitecture, EntropyModel};
use crate::error::{config_err, Error, Result};
use crate::image::RgbImage;
use crate::tensor::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};

/// Optimizer and schedule settings shared by both trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Codec iterations unrolled per step.
    pub iterations: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; `None` disables them.
    pub checkpoint_every: Option<usize>,
    /// Steps between progress log lines.
    pub log_every: usize,
}

impl TrainConfig {
    /// Batch 32, 16 unrolled iterations.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: 16,
            learning_rate: 0.5,
            steps: 1_000_000,
            seed: 0,
            checkpoint_every: Some(10_000),
            log_every: 1000,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 8,
            learning_rate: 3e-3,
            steps: 2000,
            seed: 0,
            checkpoint_every: Some(500),
            log_every: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Usage("batch size and iterations must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// `β = 1 / (B·H·W·C·n)` for 32×32 RGB patches.
    pub fn beta(&self) -> f64 {
        1.0 / (self.batch_size * data::TILE * data::TILE * 3 * self.iterations) as f64
    }
}

/// Endless stream of shuffled indices.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn collect_grads(grads: &Gradients<f32>, vars: &[Var], params: &[Tensor<f32>]) -> Option<Vec<Tensor<f32>>> {
    let g: Vec<Tensor<f32>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    g.iter().all(Tensor::all_finite).then_some(g)
}

/// Called with the step count and the current parameters at every
/// checkpoint, and with the last good parameters before a divergence error.
pub type Checkpoint<'a, M> = &'a mut dyn FnMut(usize, &M) -> Result<()>;

/// Trains `codec` in place on 32×32 patches; returns the per-step loss.
pub fn train_codec(
    codec: &mut Codec<f32>,
    patches: &[Patch],
    cfg: &TrainConfig,
    mut checkpoint: Option<Checkpoint<'_, Codec<f32>>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Usage("no training patches".into()));
    }
    let mut sampler = Sampler::new(patches.len(), cfg.seed);
    let mut bin_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        codec.params().tensors(),
    );
    let options = RunOptions::training();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<&Patch> = sampler.take(cfg.batch_size).into_iter().map(|i| &patches[i]).collect();
        let x = data::batch::<f32>(&picked)?;
        let mut tape = Tape::new();
        let p = codec.params().bind(&mut tape);
        let xv = tape.constant(x);
        let its = codec
            .net()
            .unroll(&mut tape, &p, xv, cfg.iterations, &options, &mut bin_rng)?;
        let loss_var = codec::loss(&mut tape, &its)?;
        let loss = f64::from(tape.value(loss_var).data()[0]);
        let grads = tape.backward(loss_var)?;
        let grads = collect_grads(&grads, p.vars(), codec.params().tensors());
        let Some(grads) = grads.filter(|_| loss.is_finite()) else {
            if let Some(cb) = checkpoint.as_mut() {
                cb(step, codec)?;
            }
            return Err(Error::Diverged { step });
        };
        losses.push(loss);
        adam.step(codec.params_mut().tensors_mut(), &grads)?;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!("codec step {}: loss {loss:.5}", step + 1);
        }
        if let (Some(every), Some(cb)) = (cfg.checkpoint_every, checkpoint.as_mut()) {
            if every > 0 && (step + 1) % every == 0 {
                cb(step + 1, codec)?;
            }
        }
    }
    Ok(losses)
}

/// One learning rate of a sweep with the codec it produced and its losses.
pub type SweepRun = (f64, Codec<f32>, Vec<f64>);

/// Trains one codec per learning rate from the same initialization and
/// returns each rate with its loss history.
pub fn sweep_learning_rates(
    initial: &Codec<f32>,
    patches: &[Patch],
    cfg: &TrainConfig,
    rates: &[f64],
) -> Result<Vec<SweepRun>> {
    rates
        .iter()
        .map(|&lr| {
            let mut codec = initial.clone();
            let cfg = TrainConfig {
                learning_rate: lr,
                ..cfg.clone()
            };
            let losses = train_codec(&mut codec, patches, &cfg, None)?;
            Ok((lr, codec, losses))
        })
        .collect()
}

/// Deterministic codes of every image, padded as the bitstream would pad it.
pub fn codes_for_images(codec: &Codec<f32>, images: &[RgbImage], k: usize) -> Result<Vec<Vec<CodeTensor>>> {
    let a = codec.arch().mode.alignment();
    images
        .iter()
        .map(|img| codec.encode_image(&img.pad_to_multiple(a).to_signed(), k))
        .collect()
}

/// Settings specific to entropy-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Side of the random code-grid crops trained on.
    pub crop: usize,
    pub log_every: usize,
}

impl EntropyTrainConfig {
    pub fn desk() -> Self {
        EntropyTrainConfig {
            batch_size: 8,
            learning_rate: 3e-3,
            steps: 400,
            seed: 0,
            crop: 8,
            log_every: 50,
        }
    }
}

fn crop_codes(seq: &[CodeTensor], y0: usize, x0: usize, size: usize) -> Vec<Tensor<f32>> {
    seq.iter()
        .map(|c| {
            let mut bits = Vec::with_capacity(size * size * c.depth());
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    for d in 0..c.depth() {
                        bits.push(c.get(y, x, d));
                    }
                }
            }
            CodeTensor::new(size, size, c.depth(), c.iteration(), bits)
                .expect("crop shape")
                .to_signs()
        })
        .collect()
}

/// Trains a probability model on code sequences (one `Vec` of iterations per
/// image) produced by the codec with hash `codec_hash`; returns the model and
/// the per-step bits per bit.
pub fn train_entropy(
    sequences: &[Vec<CodeTensor>],
    codec_hash: Option<ModelHash>,
    arch: EntropyArchitecture,
    cfg: &EntropyTrainConfig,
) -> Result<(EntropyModel<f32>, Vec<f64>)> {
    let hash = codec_hash.ok_or_else(|| config_err!("entropy training needs the hash of the codec that produced the codes"))?;
    if cfg.batch_size == 0 || cfg.crop == 0 {
        return Err(Error::Usage("batch size and crop must be positive".into()));
    }
    let usable: Vec<&Vec<CodeTensor>> = sequences
        .iter()
        .filter(|s| s.first().is_some_and(|c| c.height() >= cfg.crop && c.width() >= cfg.crop))
        .collect();
    let k = usable
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Usage(format!("no code grid is at least {0}×{0}", cfg.crop)))?;
    if usable.iter().any(|s| s.len() != k) {
        return Err(config_err!("code sequences differ in iteration count"));
    }
    let mut model = EntropyModel::<f32>::new(arch, hash, cfg.seed)?;
    let mut sampler = Sampler::new(usable.len(), cfg.seed);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        model.params().tensors(),
    );
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut per_iter: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
        for i in sampler.take(cfg.batch_size) {
            let s = usable[i];
            let y0 = crop_rng.gen_range(0..=s[0].height() - cfg.crop);
            let x0 = crop_rng.gen_range(0..=s[0].width() - cfg.crop);
            for (t, c) in crop_codes(s, y0, x0, cfg.crop).into_iter().enumerate() {
                per_iter[t].push(c);
            }
        }
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let vars = per_iter
            .iter()
            .map(|items| Ok(tape.constant(Tensor::stack(items)?)))
            .collect::<Result<Vec<_>>>()?;
        let loss_var = model.net().loss(&mut tape, &p, &vars)?;
        let loss = f64::from(tape.value(loss_var).data()[0]);
        let grads = tape.backward(loss_var)?;
        let Some(grads) = collect_grads(&grads, p.vars(), model.params().tensors()).filter(|_| loss.is_finite()) else {
            return Err(Error::Diverged { step });
        };
        history.push(loss);
        adam.step(model.params_mut().tensors_mut(), &grads)?;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!("entropy step {}: {loss:.4} bits/bit", step + 1);
        }
    }
    Ok((model, history))
}
