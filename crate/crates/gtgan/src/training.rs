//! Adversarial training: WGAN critic objective with gradient penalty, the
//! node-classification loss, and the graph-based cycle-consistency loss fed
//! by a learned adjacency predictor.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{save_checkpoint, Adam64, Bound, ParamStore64, Rng, Tape64, Tensor64, Var};

use crate::data::Sample;
use crate::discriminator::{present_types, Discriminator, DiscriminatorConfig};
use crate::error::{GtganError, Result};
use crate::generator::{init_node_features, Generator, GeneratorConfig};
use crate::graph::{shortest_distance_matrix, WeightedAdjMatrix};
use crate::mpn::ConvMpnVariant;

// ── Adjacency predictor ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Fixed channel budget for stacked masks; layouts with more rooms are
    /// rejected, fewer are zero-padded.
    pub max_rooms: usize,
    pub mask_size: usize,
    /// Widths of the two stride-2 encoder convolutions.
    pub channels: (usize, usize),
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            max_rooms: 16,
            mask_size: 32,
            channels: (16, 32),
        }
    }
}

impl PredictorConfig {
    pub fn desk() -> Self {
        Self {
            max_rooms: 8,
            mask_size: 12,
            channels: (8, 16),
        }
    }

    pub fn tiny() -> Self {
        Self {
            max_rooms: 4,
            mask_size: 8,
            channels: (4, 8),
        }
    }
}

/// Conv encoder over channel-stacked room masks with a fully-connected head
/// emitting a square matrix, symmetrized with a forced-zero diagonal. This
/// is the differentiable route from generated masks to an adjacency
/// estimate; the geometric extractor serves evaluation only.
#[derive(Debug, Clone)]
pub struct AdjacencyPredictor {
    pub config: PredictorConfig,
}

impl AdjacencyPredictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        if !config.mask_size.is_multiple_of(4) || config.max_rooms == 0 {
            return Err(GtganError::InvalidInput(
                "predictor needs mask_size % 4 == 0 and max_rooms > 0".into(),
            ));
        }
        Ok(Self { config })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore64 {
        let cfg = &self.config;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore64::new();
        let (c0, c1) = cfg.channels;
        let m = cfg.max_rooms;
        p.add_kaiming("pred.enc0.w", vec![c0, m, 4, 4], m * 16, &mut rng);
        p.add_zeros("pred.enc0.b", vec![c0]);
        p.add_kaiming("pred.enc1.w", vec![c1, c0, 4, 4], c0 * 16, &mut rng);
        p.add_zeros("pred.enc1.b", vec![c1]);
        let flat = c1 * (cfg.mask_size / 4) * (cfg.mask_size / 4);
        p.add_kaiming("pred.fc.w", vec![m * m, flat], flat, &mut rng);
        p.add_zeros("pred.fc.b", vec![m * m]);
        p
    }

    /// Differentiable M x M adjacency estimate for M stacked masks:
    /// symmetric, exactly zero diagonal.
    pub fn forward(&self, tape: &mut Tape64, params: &Bound, masks: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let m = masks.len();
        if m == 0 || m > cfg.max_rooms {
            return Err(GtganError::InvalidInput(format!(
                "{m} masks for a predictor capped at {} rooms",
                cfg.max_rooms
            )));
        }
        let s = cfg.mask_size;
        let mut stack = masks.to_vec();
        if m < cfg.max_rooms {
            stack.push(tape.zeros_const(vec![cfg.max_rooms - m, s, s]));
        }
        let x = tape.concat0(&stack)?;
        let h = tape.conv2d(x, params.var("pred.enc0.w"), 2, 1)?;
        let h = tape.add_chan_bias(h, params.var("pred.enc0.b"))?;
        let h = tape.leaky_relu(h, 0.1);
        let h = tape.conv2d(h, params.var("pred.enc1.w"), 2, 1)?;
        let h = tape.add_chan_bias(h, params.var("pred.enc1.b"))?;
        let h = tape.leaky_relu(h, 0.1);
        let flat_len = cfg.channels.1 * (s / 4) * (s / 4);
        let flat = tape.reshape(h, vec![flat_len])?;
        let full = tape.linear(flat, params.var("pred.fc.w"), Some(params.var("pred.fc.b")))?;
        let square = tape.reshape(full, vec![cfg.max_rooms, cfg.max_rooms])?;
        // Top-left M x M block.
        let rows = tape.slice0(square, 0, m)?;
        let rows_t = tape.transpose(rows)?;
        let cols = tape.slice0(rows_t, 0, m)?;
        let block = tape.transpose(cols)?;
        // Symmetrize and zero the diagonal.
        let block_t = tape.transpose(block)?;
        let sym2 = tape.add(block, block_t)?;
        let sym = tape.scale(sym2, 0.5);
        let off_diag = tape.constant(Tensor64::from_fn(vec![m, m], |i| {
            if i / m == i % m {
                0.0
            } else {
                1.0
            }
        }));
        Ok(tape.mul(sym, off_diag)?)
    }
}

/// Frobenius-norm mismatch between the ground-truth shortest-distance
/// matrix and a predicted adjacency tensor of the same size.
pub fn gcyc_loss(tape: &mut Tape64, gt: &WeightedAdjMatrix, pred: Var) -> Result<Var> {
    let m = gt.size();
    if tape.shape(pred) != [m, m] {
        return Err(GtganError::InvalidInput(format!(
            "adjacency shapes differ: {m}x{m} vs {:?}",
            tape.shape(pred)
        )));
    }
    let target = tape.constant(Tensor64::new(vec![m, m], gt.to_f64())?);
    let diff = tape.sub(target, pred)?;
    Ok(tape.frobenius_norm(diff)?)
}

// ── Adversarial objective ───────────────────────────────────────────────

/// Which batch element a critic invocation is scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticInput {
    Real,
    Fake,
    Interpolate,
}

/// Scores one graph of masks: (tape, sample index, input kind, masks).
pub type CriticFn<'a> = dyn FnMut(&mut Tape64, usize, CriticInput, &[Var]) -> Result<Var> + 'a;

/// Critic-side and generator-side adversarial losses over one batch.
pub struct AdvOutcome {
    pub loss_d: Var,
    pub loss_g_adv: Var,
    pub wasserstein_gap: Var,
    pub gradient_penalty: Var,
}

fn mean_of_scalars(tape: &mut Tape64, xs: &[Var]) -> Result<Var> {
    let s = tape.sum_many(xs)?;
    Ok(tape.scale(s, 1.0 / xs.len() as f64))
}

/// WGAN critic loss with gradient penalty on per-sample mask interpolates,
/// plus the generator's adversarial term: critic scores of fakes are pushed
/// down for the critic and up for the generator. Interpolates enter as
/// fresh gradient-requiring leaves; the penalty differentiates the critic's
/// input gradient, which the tape supports natively.
pub fn adversarial_losses(
    tape: &mut Tape64,
    critic: &mut CriticFn<'_>,
    real: &[Vec<Var>],
    fake: &[Vec<Var>],
    eps: &[f64],
    gp_weight: f64,
) -> Result<AdvOutcome> {
    if real.len() != fake.len() || real.is_empty() || eps.len() != real.len() {
        return Err(GtganError::InvalidInput(
            "adversarial batch sizes must match and be non-empty".into(),
        ));
    }
    let mut d_real = Vec::with_capacity(real.len());
    let mut d_fake = Vec::with_capacity(fake.len());
    let mut penalties = Vec::with_capacity(real.len());
    for (i, ((real_masks, fake_masks), &e)) in real.iter().zip(fake).zip(eps).enumerate() {
        d_real.push(critic(tape, i, CriticInput::Real, real_masks)?);
        d_fake.push(critic(tape, i, CriticInput::Fake, fake_masks)?);

        let interp: Vec<Var> = real_masks
            .iter()
            .zip(fake_masks)
            .map(|(&r, &f)| {
                let shape = tape.shape(r).to_vec();
                let data: Vec<f64> = tape
                    .value(r)
                    .data()
                    .iter()
                    .zip(tape.value(f).data())
                    .map(|(&rv, &fv)| e * rv + (1.0 - e) * fv)
                    .collect();
                Ok(tape.input(Tensor64::new(shape, data)?, true))
            })
            .collect::<Result<Vec<_>>>()?;
        let d_hat = critic(tape, i, CriticInput::Interpolate, &interp)?;
        let grads = tape.grad(d_hat, &interp)?;
        let sq_sums: Vec<Var> = grads
            .iter()
            .map(|&g| {
                let sq = tape.mul(g, g)?;
                Ok(tape.sum_all(sq))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = tape.sum_many(&sq_sums)?;
        // Zero subgradient at an exactly-zero critic gradient, mirroring the
        // Frobenius-norm convention; sqrt'(0) would otherwise poison the
        // second-order pass.
        let norm = if tape.value(total).item()? == 0.0 {
            tape.scale(total, 0.0)
        } else {
            tape.sqrt(total)
        };
        let one = tape.scalar_const(1.0);
        let dev = tape.sub(norm, one)?;
        penalties.push(tape.mul(dev, dev)?);
    }
    let mean_real = mean_of_scalars(tape, &d_real)?;
    let mean_fake = mean_of_scalars(tape, &d_fake)?;
    let gradient_penalty = mean_of_scalars(tape, &penalties)?;
    let wasserstein_gap = tape.sub(mean_fake, mean_real)?;
    let scaled_gp = tape.scale(gradient_penalty, gp_weight);
    let loss_d = tape.add(wasserstein_gap, scaled_gp)?;
    let loss_g_adv = tape.scale(mean_fake, -1.0);
    Ok(AdvOutcome {
        loss_d,
        loss_g_adv,
        wasserstein_gap,
        gradient_penalty,
    })
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_adv: f64,
    pub lambda_cls: f64,
    pub lambda_gcyc: f64,
    /// Weight of the supervised predictor term (real masks against BFS
    /// matrices) folded into the cycle loss.
    pub predictor_supervision: f64,
    pub d_steps_per_g: usize,
    pub gp_weight: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            steps: 1000,
            lambda_adv: 1.0,
            lambda_cls: 1.0,
            lambda_gcyc: 0.1,
            predictor_supervision: 1.0,
            d_steps_per_g: 1,
            gp_weight: 10.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Generator, discriminator, predictor and loop settings as one unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[derive(Default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
}


impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            predictor: PredictorConfig::desk(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.mask_size != self.discriminator.mask_size
            || self.generator.mask_size != self.predictor.mask_size
        {
            return Err(GtganError::InvalidInput(format!(
                "mask sizes disagree: generator {}, discriminator {}, predictor {}",
                self.generator.mask_size, self.discriminator.mask_size, self.predictor.mask_size
            )));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(GtganError::InvalidInput(
                "batch_size and steps must be positive".into(),
            ));
        }
        for (name, w) in [
            ("lambda_adv", self.train.lambda_adv),
            ("lambda_cls", self.train.lambda_cls),
            ("lambda_gcyc", self.train.lambda_gcyc),
            ("gp_weight", self.train.gp_weight),
            ("predictor_supervision", self.train.predictor_supervision),
        ] {
            if w < 0.0 {
                return Err(GtganError::InvalidInput(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// The eleven study configurations: mixtures of the plain message-passing
/// networks and the full attention networks, attention/modeling-block
/// knockouts, combine-rule variants, and the cycle loss on top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B9,
    B10,
    B11,
}

impl FromStr for AblationVariant {
    type Err = GtganError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B1" => Ok(Self::B1),
            "B2" => Ok(Self::B2),
            "B3" => Ok(Self::B3),
            "B4" => Ok(Self::B4),
            "B5" => Ok(Self::B5),
            "B6" => Ok(Self::B6),
            "B7" => Ok(Self::B7),
            "B8" => Ok(Self::B8),
            "B9" => Ok(Self::B9),
            "B10" => Ok(Self::B10),
            "B11" => Ok(Self::B11),
            other => Err(GtganError::InvalidInput(format!(
                "unknown ablation variant {other:?}; expected B1..B11"
            ))),
        }
    }
}

impl AblationVariant {
    pub const ALL: [Self; 11] = [
        Self::B1,
        Self::B2,
        Self::B3,
        Self::B4,
        Self::B5,
        Self::B6,
        Self::B7,
        Self::B8,
        Self::B9,
        Self::B10,
        Self::B11,
    ];

    /// Applies the variant to a base configuration.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut p = base.clone();
        let plain_g = |g: &mut GeneratorConfig| {
            g.use_cna = false;
            g.use_nna = false;
            g.use_gmb = false;
        };
        let plain_d = |d: &mut DiscriminatorConfig, t: &mut TrainConfig| {
            d.use_gte = false;
            d.use_cls_head = false;
            t.lambda_cls = 0.0;
        };
        // Only the full model keeps the cycle loss.
        if self != Self::B11 {
            p.train.lambda_gcyc = 0.0;
        } else if p.train.lambda_gcyc == 0.0 {
            p.train.lambda_gcyc = 0.1;
        }
        match self {
            Self::B1 => {
                plain_g(&mut p.generator);
                plain_d(&mut p.discriminator, &mut p.train);
            }
            Self::B2 => plain_d(&mut p.discriminator, &mut p.train),
            Self::B3 => plain_g(&mut p.generator),
            Self::B4 | Self::B11 => {}
            Self::B5 => p.generator.use_nna = false,
            Self::B6 => p.generator.use_cna = false,
            Self::B7 => p.generator.use_gmb = false,
            Self::B8 => p.generator.variant = ConvMpnVariant::TransformerOnly,
            Self::B9 => p.generator.variant = ConvMpnVariant::Eq3,
            Self::B10 => p.generator.variant = ConvMpnVariant::Eq4,
        }
        p
    }
}

// ── Training loop ───────────────────────────────────────────────────────

/// One line of the newline-delimited metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_cls: f64,
    pub loss_gcyc: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub params: ParamStore64,
}

pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub predictor: AdjacencyPredictor,
    pub config: PipelineConfig,
}

impl Trainer {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            generator: Generator::new(config.generator.clone())?,
            discriminator: Discriminator::new(config.discriminator.clone())?,
            predictor: AdjacencyPredictor::new(config.predictor.clone())?,
            config,
        })
    }

    /// Fresh combined parameter store for all three networks, derived
    /// deterministically from the training seed.
    pub fn init_params(&self) -> ParamStore64 {
        let seed = self.config.train.seed;
        let mut params = self.generator.init_params(seed ^ 0x67656e);
        params.merge(self.discriminator.init_params(seed ^ 0x64697363));
        params.merge(self.predictor.init_params(seed ^ 0x70726564));
        params
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.canvas as usize != self.config.generator.mask_size {
            return Err(GtganError::InvalidInput(format!(
                "sample canvas {} != model mask size {}",
                sample.canvas, self.config.generator.mask_size
            )));
        }
        if sample.room_count() > self.config.predictor.max_rooms {
            return Err(GtganError::InvalidInput(format!(
                "sample has {} rooms, predictor caps at {}",
                sample.room_count(),
                self.config.predictor.max_rooms
            )));
        }
        Ok(())
    }

    /// Alternating critic/generator updates. Metrics stream to
    /// `out_dir/metrics.jsonl` when an output directory is given;
    /// checkpoints land there too.
    pub fn train(&self, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if samples.is_empty() {
            return Err(GtganError::InvalidInput("empty dataset".into()));
        }
        for s in samples {
            self.check_sample(s)?;
        }
        let cfg = &self.config.train;
        let mut params = self.init_params();
        let mut adam_g = Adam64::new(cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut adam_d = Adam64::new(cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut rng = Rng::new(cfg.seed);
        let mut metrics = Vec::with_capacity(cfg.steps);
        let mut metrics_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };

        let adversarial = cfg.lambda_adv > 0.0;
        for step in 0..cfg.steps {
            let mut loss_d_value = 0.0;

            if adversarial {
                for _ in 0..cfg.d_steps_per_g.max(1) {
                    loss_d_value = self.critic_step(samples, &mut params, &mut adam_d, &mut rng)?;
                    if !loss_d_value.is_finite() {
                        return Err(self.abort_dump(step, "loss_d", loss_d_value, out_dir));
                    }
                }
            }

            let (g_adv, g_cls, g_gcyc) =
                self.generator_step(samples, &mut params, &mut adam_g, &mut rng)?;
            for (what, v) in [("loss_g_adv", g_adv), ("loss_cls", g_cls), ("loss_gcyc", g_gcyc)] {
                if !v.is_finite() {
                    return Err(self.abort_dump(step, what, v, out_dir));
                }
            }

            let record = StepMetrics {
                step,
                loss_d: loss_d_value,
                loss_g_adv: g_adv,
                loss_cls: g_cls,
                loss_gcyc: g_gcyc,
            };
            if let Some(f) = &mut metrics_file {
                serde_json::to_writer(&mut *f, &record)?;
                f.write_all(b"\n")?;
            }
            metrics.push(record);

            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                    save_checkpoint(&params, &dir.join(format!("checkpoint_{:06}.json", step + 1)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&params, &dir.join("checkpoint_final.json"))?;
        }
        Ok(TrainOutcome { metrics, params })
    }

    fn draw_batch<'s>(&self, samples: &'s [Sample], rng: &mut Rng) -> Vec<&'s Sample> {
        (0..self.config.train.batch_size)
            .map(|_| &samples[rng.below(samples.len())])
            .collect()
    }

    /// One critic update: real vs detached fake masks plus gradient penalty
    /// and (when enabled) the classification loss on real layouts.
    fn critic_step(
        &self,
        samples: &[Sample],
        params: &mut ParamStore64,
        adam_d: &mut Adam64,
        rng: &mut Rng,
    ) -> Result<f64> {
        let cfg = &self.config.train;
        let batch = self.draw_batch(samples, rng);
        let noise_seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
        let eps: Vec<f64> = batch.iter().map(|_| rng.uniform()).collect();

        // Detached fakes: generated on a throwaway tape.
        let fake_values: Vec<Vec<Tensor64>> = batch
            .iter()
            .zip(&noise_seeds)
            .map(|(sample, &seed)| {
                let mut g_tape = Tape64::new();
                let bound = params.bind_frozen(&mut g_tape);
                let features =
                    init_node_features(&sample.diagram, seed, self.config.generator.noise_dim);
                let fwd = self
                    .generator
                    .forward(&mut g_tape, &bound, &sample.diagram, &features)?;
                Ok(fwd
                    .masks
                    .iter()
                    .map(|&m| g_tape.value(m).clone())
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape64::new();
        let bound = params.bind_trainable(&mut tape, |n| n.starts_with("disc."));
        let real: Vec<Vec<Var>> = batch
            .iter()
            .map(|s| s.masks.iter().map(|m| tape.constant(m.clone())).collect())
            .collect();
        let fake: Vec<Vec<Var>> = fake_values
            .iter()
            .map(|ms| ms.iter().map(|m| tape.constant(m.clone())).collect())
            .collect();

        let graphs: Vec<_> = batch.iter().map(|s| s.diagram.clone()).collect();
        let disc = &self.discriminator;
        let want_cls = cfg.lambda_cls > 0.0 && self.config.discriminator.use_cls_head;
        let mut real_logits: Vec<Option<Var>> = vec![None; batch.len()];
        let mut critic = |tape: &mut Tape64, i: usize, kind: CriticInput, masks: &[Var]| {
            let out = disc.forward(tape, &bound, &graphs[i], masks)?;
            if want_cls && kind == CriticInput::Real {
                real_logits[i] = out.type_logits;
            }
            Ok(out.realism)
        };
        let adv = adversarial_losses(&mut tape, &mut critic, &real, &fake, &eps, cfg.gp_weight)?;

        let mut total = adv.loss_d;
        if want_cls {
            let mut cls_terms = Vec::new();
            for (sample, logits) in batch.iter().zip(real_logits) {
                let logits = logits.expect("real critic call records logits");
                let target = present_types(&sample.layout.room_types());
                let t = tape.constant(target);
                cls_terms.push(tape.bce_with_logits(logits, t)?);
            }
            let mean_cls = mean_of_scalars(&mut tape, &cls_terms)?;
            let scaled = tape.scale(mean_cls, cfg.lambda_cls);
            total = tape.add(total, scaled)?;
        }

        let loss_value = tape.value(total).item()?;
        tape.backward(total)?;
        let grads: BTreeMap<String, Vec<f64>> = bound
            .grads(&tape)
            .into_iter()
            .filter(|(name, _)| name.starts_with("disc."))
            .collect();
        if std::env::var_os("GTGAN_DEBUG_TRAIN").is_some() {
            eprintln!(
                "critic: loss={loss_value} gap={} gp={}",
                tape.value(adv.wasserstein_gap).item()?,
                tape.value(adv.gradient_penalty).item()?
            );
            for (name, g) in &grads {
                let mx = g.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                if g.iter().any(|v| !v.is_finite()) || mx > 1e6 {
                    eprintln!("  grad {name}: max {mx}");
                }
            }
        }
        adam_d.step(params, &grads);
        Ok(loss_value)
    }

    /// One generator/predictor update; returns the logged loss components
    /// (adversarial, classification, cycle).
    fn generator_step(
        &self,
        samples: &[Sample],
        params: &mut ParamStore64,
        adam_g: &mut Adam64,
        rng: &mut Rng,
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.config.train;
        let batch = self.draw_batch(samples, rng);
        let noise_seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();

        let mut tape = Tape64::new();
        let bound = params.bind_trainable(&mut tape, |n| {
            n.starts_with("gen.") || n.starts_with("pred.")
        });

        let mut adv_terms = Vec::new();
        let mut cls_terms = Vec::new();
        let mut gcyc_terms = Vec::new();
        for (sample, &seed) in batch.iter().zip(&noise_seeds) {
            let features =
                init_node_features(&sample.diagram, seed, self.config.generator.noise_dim);
            let fwd = self
                .generator
                .forward(&mut tape, &bound, &sample.diagram, &features)?;

            if cfg.lambda_adv > 0.0 {
                let out = self
                    .discriminator
                    .forward(&mut tape, &bound, &sample.diagram, &fwd.masks)?;
                adv_terms.push(out.realism);
                if cfg.lambda_cls > 0.0 && self.config.discriminator.use_cls_head {
                    let logits = out.type_logits.expect("classification head enabled");
                    let target = present_types(&sample.layout.room_types());
                    let t = tape.constant(target);
                    cls_terms.push(tape.bce_with_logits(logits, t)?);
                }
            }

            if cfg.lambda_gcyc > 0.0 {
                let gt = shortest_distance_matrix(&sample.diagram);
                let pred = self.predictor.forward(&mut tape, &bound, &fwd.masks)?;
                gcyc_terms.push(gcyc_loss(&mut tape, &gt, pred)?);
                if cfg.predictor_supervision > 0.0 {
                    let real_masks: Vec<Var> = sample
                        .masks
                        .iter()
                        .map(|m| tape.constant(m.clone()))
                        .collect();
                    let pred_real = self.predictor.forward(&mut tape, &bound, &real_masks)?;
                    let sup = gcyc_loss(&mut tape, &gt, pred_real)?;
                    gcyc_terms.push(tape.scale(sup, cfg.predictor_supervision));
                }
            }
        }

        let mut loss_terms: Vec<Var> = Vec::new();
        let mut adv_value = 0.0;
        if !adv_terms.is_empty() {
            let mean_adv = mean_of_scalars(&mut tape, &adv_terms)?;
            let g_adv = tape.scale(mean_adv, -1.0);
            adv_value = tape.value(g_adv).item()?;
            loss_terms.push(tape.scale(g_adv, cfg.lambda_adv));
        }
        let mut cls_value = 0.0;
        if !cls_terms.is_empty() {
            let mean_cls = mean_of_scalars(&mut tape, &cls_terms)?;
            cls_value = tape.value(mean_cls).item()?;
            loss_terms.push(tape.scale(mean_cls, cfg.lambda_cls));
        }
        let mut gcyc_value = 0.0;
        if !gcyc_terms.is_empty() {
            let mean_gcyc = mean_of_scalars(&mut tape, &gcyc_terms)?;
            gcyc_value = tape.value(mean_gcyc).item()?;
            loss_terms.push(tape.scale(mean_gcyc, cfg.lambda_gcyc));
        }
        if loss_terms.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }
        let total = tape.sum_many(&loss_terms)?;
        tape.backward(total)?;
        let grads: BTreeMap<String, Vec<f64>> = bound
            .grads(&tape)
            .into_iter()
            .filter(|(name, _)| name.starts_with("gen.") || name.starts_with("pred."))
            .collect();
        if std::env::var_os("GTGAN_DEBUG_TRAIN").is_some() {
            eprintln!("gen: adv={adv_value} cls={cls_value} gcyc={gcyc_value}");
            for (name, g) in &grads {
                let mx = g.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                if g.iter().any(|v| !v.is_finite()) || mx > 1e6 {
                    eprintln!("  grad {name}: max {mx}");
                }
            }
        }
        adam_g.step(params, &grads);
        Ok((adv_value, cls_value, gcyc_value))
    }

    fn abort_dump(
        &self,
        step: usize,
        what: &str,
        value: f64,
        out_dir: Option<&Path>,
    ) -> GtganError {
        let dump_path: PathBuf = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(std::env::temp_dir)
            .join("nonfinite_dump.json");
        let dump = serde_json::json!({
            "step": step,
            "component": what,
            "value_is_nan": value.is_nan(),
            "config": &self.config,
        });
        let _ = std::fs::write(&dump_path, dump.to_string());
        GtganError::NonFiniteLoss {
            step,
            what: what.to_string(),
            dump: dump_path.display().to_string(),
        }
    }
}

impl PipelineConfig {
    /// Minimal dimensions for finite-difference sweeps and plumbing tests.
    pub fn tiny() -> Self {
        Self {
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
            predictor: PredictorConfig::tiny(),
            train: TrainConfig::default(),
        }
    }
}
