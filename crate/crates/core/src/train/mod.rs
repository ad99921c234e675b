//! Optimization, the training loop, whole-volume inference and parameter
//! sweeps.

mod adam;
mod infer;
mod sweep;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use infer::infer;
pub use sweep::{sweep, SweepAxis, SweepRow, SweepSetup, SweepTable};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;

use crate::autograd::Graph;
use crate::data::{batch_tensor, sample_patches, LabelVolume, PatchSpec, Volume, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, SegmentationReport};
use crate::network::checkpoint::save_checkpoint;
use crate::network::config::parse;
use crate::network::{make_ablation, ModelId, Network, NetworkConfig};
use crate::nn::{cross_entropy, Mode};
use crate::params::{ForwardCtx, SeededRng};

/// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Base architecture; `model` selects the ablation variant built from it.
    pub network: NetworkConfig,
    pub model: ModelId,
    pub batch_size: usize,
    pub patch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validate every this many steps (0: never).
    pub validate_every: usize,
    pub val_overlap_step: usize,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Checkpoint stem; nothing is written when absent.
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            model: ModelId::Full,
            batch_size: 5,
            patch_size: 32,
            steps: 2000,
            seed: 0,
            adam: AdamConfig::default(),
            validate_every: 0,
            val_overlap_step: 16,
            checkpoint_every: 0,
            checkpoint: None,
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn network_config(&self) -> NetworkConfig {
        make_ablation(self.model, &self.network)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let m = self.network.size_multiple().max(4);
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {m}",
                self.patch_size
            )));
        }
        PatchSpec::new(self.patch_size, self.val_overlap_step)?;
        Ok(())
    }

    /// Flat `key=value` form of every training and network setting.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("model", self.model.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_epsilon", self.adam.epsilon.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("val_overlap_step", self.val_overlap_step.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        v.extend(self.network.to_pairs());
        v
    }

    /// Sets a training key, or else a network key; anything else is rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam.epsilon = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "validate_every" => self.validate_every = parse(key, value)?,
            "val_overlap_step" => self.val_overlap_step = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return self.network.set(key, value),
        }
        Ok(())
    }
}

/// A normalized training volume and an optional held-out pair.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub validation: Option<(Volume, LabelVolume)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean foreground Dice on the held-out volume.
    pub val_dice: Option<f64>,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        match self.val_dice {
            Some(d) => format!("{}\t{}\t{}", self.step, self.loss, d),
            None => format!("{}\t{}", self.step, self.loss),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub log: Vec<LogRecord>,
}

/// Foreground classes `1..K` with display names.
pub fn foreground_classes(num_classes: usize) -> Vec<(u8, String)> {
    (1..num_classes)
        .map(|c| {
            let name = if num_classes == CLASS_NAMES.len() {
                CLASS_NAMES[c].to_string()
            } else {
                format!("class{c}")
            };
            (c as u8, name)
        })
        .collect()
}

/// Sliding-window prediction of `volume` scored on every foreground class.
pub fn evaluate_network(
    net: &Network<f32>,
    volume: &Volume,
    truth: &LabelVolume,
    spec: PatchSpec,
) -> Result<SegmentationReport> {
    let (_, pred) = infer(net, volume, spec)?;
    let classes = foreground_classes(net.config().num_classes);
    let named: Vec<(u8, &str)> = classes.iter().map(|(c, n)| (*c, n.as_str())).collect();
    evaluate(&pred, truth, &named)
}

pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// [`train`] with a callback invoked after every logged step.
pub fn train_with(cfg: &TrainConfig, data: &TrainData, mut observe: impl FnMut(&LogRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_cfg = cfg.network_config();
    if data.volume.channels != net_cfg.in_channels {
        return Err(Error::Dimension {
            op: "train",
            lhs: data.volume.shape().to_vec(),
            rhs: vec![net_cfg.in_channels],
        });
    }
    let mut net = Network::<f32>::build(&net_cfg, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut sampling = stream(cfg.seed, STREAM_SAMPLING);
    let mut dropout_rng = stream(cfg.seed, STREAM_DROPOUT);
    let mut adam = AdamState::new(cfg.adam, net.store().params());
    let val_spec = PatchSpec::new(cfg.patch_size, cfg.val_overlap_step)?;
    let mut log_file = match &cfg.loss_log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            File::create(p).map_err(|e| Error::io(p, e))?;
            Some((
                OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?,
                p.clone(),
            ))
        }
        None => None,
    };
    let (s, c) = (cfg.patch_size, data.volume.channels);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let at_step = |e: Error| match e {
            Error::NonFinite { op, step: None } => Error::NonFinite { op, step: Some(step) },
            e => e,
        };
        let samples = sample_patches(&data.volume, &data.labels, cfg.batch_size, s, &mut sampling)?;
        let (x, y) = batch_tensor(&samples, s, c)?;
        let mut g = Graph::new();
        let bound = net.store().bind(&mut g);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::new(Mode::Train, &mut dropout_rng, net.store(), &bound);
        let logits = net.forward(&mut g, &mut ctx, xv).map_err(at_step)?;
        let updates = std::mem::take(&mut ctx.stat_updates);
        drop(ctx);
        let loss_var = cross_entropy(&mut g, logits, &y).map_err(at_step)?;
        let loss = g.value(loss_var).item()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss".into(),
                step: Some(step),
            });
        }
        g.backward(loss_var).map_err(at_step)?;
        let grads: Vec<_> = bound.vars().iter().map(|&v| g.take_grad(v)).collect();
        drop(g);
        adam_step(net.store_mut().params_mut(), &grads, &mut adam)?;
        let momentum = net.config().bn_momentum;
        net.store_mut().apply_stats(&updates, momentum);

        let val_dice = match &data.validation {
            Some((vol, truth)) if cfg.validate_every > 0 && step % cfg.validate_every == 0 => {
                evaluate_network(&net, vol, truth, val_spec)?.average_dice
            }
            _ => None,
        };
        let record = LogRecord { step, loss, val_dice };
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        observe(&record);
        log.push(record);
        if let Some(stem) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                save_checkpoint(&net, stem)?;
            }
        }
    }
    if let Some(stem) = &cfg.checkpoint {
        save_checkpoint(&net, stem)?;
    }
    Ok(TrainOutcome { network: net, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    fn tiny() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig {
                base_width: 4,
                ..NetworkConfig::default()
            },
            batch_size: 2,
            patch_size: 8,
            steps: 3,
            val_overlap_step: 8,
            ..TrainConfig::default()
        }
    }

    fn data() -> TrainData {
        let (mut volume, labels) = generate_phantom(0, [16, 16, 16], 4, 0.05).unwrap();
        volume.normalize();
        TrainData {
            volume,
            labels,
            validation: None,
        }
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = tiny();
        cfg.model = ModelId::Model3;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
    }

    #[test]
    fn patch_size_must_divide_by_four() {
        let cfg = TrainConfig {
            patch_size: 17,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identical_runs_identical_logs() {
        let d = data();
        let a = train(&tiny(), &d).unwrap();
        let b = train(&tiny(), &d).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.network, b.network);
        assert_eq!(a.log.len(), 3);
    }
}
