//! Run configuration: schema-validated `key = value` sections with
//! every default documented here and the effective values echoed to
//! `run.cfg` in the output directory.

use neuralign::data::{CfgFile, Modality};
use neuralign::error::{Error, Result};
use neuralign::model::ModelConfig;
use neuralign::objective::INIT_LOGIT_SCALE;
use neuralign::sla::{GateOperand, VisionAnchor};
use neuralign::synth::SynthConfig;
use neuralign::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_ways: Vec<usize>,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// N used by the window sweep; 0 means "the whole test set".
    pub sweep_n_way: usize,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// 0 means "match the dataset's K".
    pub k_prime: usize,
    /// 0 means "match the dataset's K".
    pub latent_dim: usize,
    pub vision_anchor: VisionAnchor,
    pub gate_operand: GateOperand,
    pub balance: f64,
    pub init_logit_scale: f64,
    pub train: TrainConfig,
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "seed", "n_train", "n_test", "latent_dim", "k", "channels", "timesteps",
            "sigma_brain", "sigma_sem", "modality", "n_categories",
        ],
    ),
    ("model", &["d_model", "n_heads", "n_layers", "d_ff"]),
    ("sup", &[]),
    ("sla", &["k_prime", "latent_dim", "vision_anchor", "gate_operand"]),
    ("loss", &["balance", "init_logit_scale"]),
    (
        "train",
        &[
            "stage", "epochs", "batch_size", "learning_rate", "weight_decay", "beta1",
            "beta2", "warmup_frac", "cosine_decay", "seed", "freeze_encoder", "max_steps",
        ],
    ),
    ("eval", &["n_ways", "ks", "trials", "seed", "sweep_n_way"]),
];

fn reject_unknown(cfg: &CfgFile) -> Result<()> {
    for s in cfg.sections() {
        let Some((_, keys)) = SECTIONS.iter().find(|(name, _)| *name == s.name) else {
            return Err(Error::Config(format!("unknown section [{}]", s.name)));
        };
        for (k, _) in &s.entries {
            if !keys.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {}.{}", s.name, k)));
            }
        }
    }
    Ok(())
}

fn get_parsed<T: std::str::FromStr>(cfg: &CfgFile, section: &str, key: &str, default: T) -> Result<T> {
    match cfg.get(section, key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse {section}.{key} = \"{raw}\""))),
    }
}

fn get_bool(cfg: &CfgFile, section: &str, key: &str, default: bool) -> Result<bool> {
    match cfg.get(section, key) {
        None => Ok(default),
        Some("true") | Some("1") => Ok(true),
        Some("false") | Some("0") => Ok(false),
        Some(raw) => Err(Error::Config(format!("{section}.{key} = \"{raw}\" is not a boolean"))),
    }
}

fn get_list(cfg: &CfgFile, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    match cfg.get(section, key) {
        None => Ok(default.to_vec()),
        Some(raw) => raw
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad list entry \"{p}\" in {section}.{key}")))
            })
            .collect(),
    }
}

impl RunConfig {
    /// Resolve defaults, the optional config file, and the optional
    /// `--seed` override (applied to data, train and eval seeds).
    pub fn resolve(file: Option<&CfgFile>, stage: u8, seed_override: Option<u64>) -> Result<(Self, EvalConfig)> {
        let empty = CfgFile::new();
        let cfg = file.unwrap_or(&empty);
        reject_unknown(cfg)?;

        let data = SynthConfig {
            seed: get_parsed(cfg, "data", "seed", 42u64)?,
            n_train: get_parsed(cfg, "data", "n_train", 512)?,
            n_test: get_parsed(cfg, "data", "n_test", 64)?,
            latent_dim: get_parsed(cfg, "data", "latent_dim", 16)?,
            k: get_parsed(cfg, "data", "k", 32)?,
            channels: get_parsed(cfg, "data", "channels", 17)?,
            timesteps: get_parsed(cfg, "data", "timesteps", 100)?,
            sigma_brain: get_parsed(cfg, "data", "sigma_brain", 0.1)?,
            sigma_sem: get_parsed(cfg, "data", "sigma_sem", 0.1)?,
            modality: Modality::parse(cfg.get("data", "modality").unwrap_or("eeg"))?,
            n_categories: get_parsed(cfg, "data", "n_categories", 0)?,
        };

        let defaults = if stage == 2 {
            TrainConfig::stage2(42)
        } else {
            TrainConfig::stage1(42)
        };
        let train = TrainConfig {
            stage: get_parsed(cfg, "train", "stage", stage)?,
            epochs: get_parsed(cfg, "train", "epochs", defaults.epochs)?,
            batch_size: get_parsed(cfg, "train", "batch_size", defaults.batch_size)?,
            learning_rate: get_parsed(cfg, "train", "learning_rate", defaults.learning_rate)?,
            weight_decay: get_parsed(cfg, "train", "weight_decay", defaults.weight_decay)?,
            beta1: get_parsed(cfg, "train", "beta1", defaults.beta1)?,
            beta2: get_parsed(cfg, "train", "beta2", defaults.beta2)?,
            warmup_frac: get_parsed(cfg, "train", "warmup_frac", defaults.warmup_frac)?,
            cosine_decay: get_bool(cfg, "train", "cosine_decay", defaults.cosine_decay)?,
            seed: get_parsed(cfg, "train", "seed", defaults.seed)?,
            freeze_encoder: get_bool(cfg, "train", "freeze_encoder", false)?,
            max_steps: match cfg.get("train", "max_steps") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::Config(format!("cannot parse train.max_steps = \"{raw}\""))
                })?),
            },
        };
        if train.stage != stage {
            return Err(Error::Config(format!(
                "train.stage = {} conflicts with the {} subcommand",
                train.stage,
                if stage == 2 { "finetune" } else { "train" }
            )));
        }

        let k_prime = get_parsed(cfg, "sla", "k_prime", 0usize)?;
        let latent_dim = get_parsed(cfg, "sla", "latent_dim", 0usize)?;

        let mut eval = EvalConfig {
            n_ways: get_list(cfg, "eval", "n_ways", &[2, 4, 16, 64])?,
            ks: get_list(cfg, "eval", "ks", &[1, 5])?,
            trials: get_parsed(cfg, "eval", "trials", 1000)?,
            seed: get_parsed(cfg, "eval", "seed", 7)?,
            sweep_n_way: get_parsed(cfg, "eval", "sweep_n_way", 0)?,
        };

        let mut run = RunConfig {
            data,
            d_model: get_parsed(cfg, "model", "d_model", 64)?,
            n_heads: get_parsed(cfg, "model", "n_heads", 4)?,
            n_layers: get_parsed(cfg, "model", "n_layers", 2)?,
            d_ff: get_parsed(cfg, "model", "d_ff", 128)?,
            k_prime,
            latent_dim,
            vision_anchor: VisionAnchor::parse(cfg.get("sla", "vision_anchor").unwrap_or("brain"))?,
            gate_operand: GateOperand::parse(cfg.get("sla", "gate_operand").unwrap_or("decoded"))?,
            balance: get_parsed(cfg, "loss", "balance", 1.0)?,
            init_logit_scale: get_parsed(cfg, "loss", "init_logit_scale", INIT_LOGIT_SCALE)?,
            train,
        };
        if run.balance < 0.0 {
            return Err(Error::Config("loss.balance must be >= 0".into()));
        }
        if let Some(seed) = seed_override {
            run.data.seed = seed;
            run.train.seed = seed;
            eval.seed = seed;
        }
        Ok((run, eval))
    }

    /// Model structure for a given input geometry; the 0 sentinels
    /// resolve against the dataset's K here.
    pub fn model_cfg(&self, channels: usize, timesteps: usize, k: usize) -> ModelConfig {
        ModelConfig {
            channels,
            timesteps,
            k,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            k_prime: if self.k_prime == 0 { k } else { self.k_prime },
            latent_dim: if self.latent_dim == 0 { k } else { self.latent_dim },
            vision_anchor: self.vision_anchor,
            gate_operand: self.gate_operand,
            balance: self.balance,
            init_logit_scale: self.init_logit_scale,
        }
    }

    /// Every effective value, for the `run.cfg` echo. Re-running with
    /// this file reproduces the outputs byte for byte.
    pub fn echo(&self, eval: &EvalConfig) -> CfgFile {
        let mut cfg = CfgFile::new();
        let d = &self.data;
        cfg.set("data", "seed", d.seed);
        cfg.set("data", "n_train", d.n_train);
        cfg.set("data", "n_test", d.n_test);
        cfg.set("data", "latent_dim", d.latent_dim);
        cfg.set("data", "k", d.k);
        cfg.set("data", "channels", d.channels);
        cfg.set("data", "timesteps", d.timesteps);
        cfg.set("data", "sigma_brain", d.sigma_brain);
        cfg.set("data", "sigma_sem", d.sigma_sem);
        cfg.set("data", "modality", d.modality.as_str());
        cfg.set("data", "n_categories", d.n_categories);

        cfg.set("model", "d_model", self.d_model);
        cfg.set("model", "n_heads", self.n_heads);
        cfg.set("model", "n_layers", self.n_layers);
        cfg.set("model", "d_ff", self.d_ff);

        cfg.set("sla", "k_prime", self.k_prime);
        cfg.set("sla", "latent_dim", self.latent_dim);
        cfg.set("sla", "vision_anchor", self.vision_anchor.as_str());
        cfg.set("sla", "gate_operand", self.gate_operand.as_str());

        cfg.set("loss", "balance", self.balance);
        cfg.set("loss", "init_logit_scale", self.init_logit_scale);

        let t = &self.train;
        cfg.set("train", "stage", t.stage);
        cfg.set("train", "epochs", t.epochs);
        cfg.set("train", "batch_size", t.batch_size);
        cfg.set("train", "learning_rate", t.learning_rate);
        cfg.set("train", "weight_decay", t.weight_decay);
        cfg.set("train", "beta1", t.beta1);
        cfg.set("train", "beta2", t.beta2);
        cfg.set("train", "warmup_frac", t.warmup_frac);
        cfg.set("train", "cosine_decay", t.cosine_decay);
        cfg.set("train", "seed", t.seed);
        cfg.set("train", "freeze_encoder", t.freeze_encoder);
        if let Some(cap) = t.max_steps {
            cfg.set("train", "max_steps", cap);
        }

        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        cfg.set("eval", "n_ways", list(&eval.n_ways));
        cfg.set("eval", "ks", list(&eval.ks));
        cfg.set("eval", "trials", eval.trials);
        cfg.set("eval", "seed", eval.seed);
        cfg.set("eval", "sweep_n_way", eval.sweep_n_way);
        cfg
    }
}
