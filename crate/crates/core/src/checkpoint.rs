//! Checkpoints: a directory of one tensor file per parameter plus a
//! manifest listing every name, shape and freeze flag. Round trips are
//! bit-exact, which is what the fine-tuning freeze contract is checked
//! against.

use std::fs;
use std::path::Path;

use crate::data::bten::{load_array, save_array, RoleTag};
use crate::data::cfgfile::CfgFile;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::sla::{GateOperand, VisionAnchor};

pub const MANIFEST: &str = "manifest.cfg";

fn dims_str(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| p.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad dims \"{s}\""))))
        .collect()
}

pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, model: &Model<T>, stage: u8) -> Result<()> {
    let dir = dir.as_ref();
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;

    let mut manifest = CfgFile::new();
    manifest.set("checkpoint", "version", 1);
    manifest.set("checkpoint", "stage", stage);
    manifest.set("checkpoint", "param_count", model.store.len());

    let cfg = &model.cfg;
    manifest.set("model", "channels", cfg.channels);
    manifest.set("model", "timesteps", cfg.timesteps);
    manifest.set("model", "k", cfg.k);
    manifest.set("model", "d_model", cfg.d_model);
    manifest.set("model", "n_heads", cfg.n_heads);
    manifest.set("model", "n_layers", cfg.n_layers);
    manifest.set("model", "d_ff", cfg.d_ff);
    manifest.set("model", "k_prime", cfg.k_prime);
    manifest.set("model", "latent_dim", cfg.latent_dim);
    manifest.set("model", "vision_anchor", cfg.vision_anchor.as_str());
    manifest.set("model", "gate_operand", cfg.gate_operand.as_str());
    manifest.set("model", "balance", cfg.balance);
    manifest.set("model", "init_logit_scale", cfg.init_logit_scale);
    manifest.set("model", "has_adapter", u8::from(model.adapter.is_some()));

    for e in model.store.entries() {
        manifest.set(
            "params",
            &e.name,
            format!("dims={} frozen={}", dims_str(e.value.dims()), u8::from(e.frozen)),
        );
        save_array(params_dir.join(format!("{}.bten", e.name)), &e.value, RoleTag::Param)?;
    }
    manifest.write(dir.join(MANIFEST))
}

fn parse_usize(cfg: &CfgFile, key: &str) -> Result<usize> {
    cfg.require("model", key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad model.{key}")))
}

fn parse_f64(cfg: &CfgFile, key: &str) -> Result<f64> {
    cfg.require("model", key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad model.{key}")))
}

/// Rebuild the model structure recorded in the manifest and load every
/// parameter byte-for-byte.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<(Model<T>, u8)> {
    let dir = dir.as_ref();
    let manifest = CfgFile::read(dir.join(MANIFEST))?;
    let version: u32 = manifest
        .require("checkpoint", "version")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad checkpoint.version".into()))?;
    if version != 1 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let stage: u8 = manifest
        .require("checkpoint", "stage")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad checkpoint.stage".into()))?;

    let cfg = ModelConfig {
        channels: parse_usize(&manifest, "channels")?,
        timesteps: parse_usize(&manifest, "timesteps")?,
        k: parse_usize(&manifest, "k")?,
        d_model: parse_usize(&manifest, "d_model")?,
        n_heads: parse_usize(&manifest, "n_heads")?,
        n_layers: parse_usize(&manifest, "n_layers")?,
        d_ff: parse_usize(&manifest, "d_ff")?,
        k_prime: parse_usize(&manifest, "k_prime")?,
        latent_dim: parse_usize(&manifest, "latent_dim")?,
        vision_anchor: VisionAnchor::parse(manifest.require("model", "vision_anchor")?)?,
        gate_operand: GateOperand::parse(manifest.require("model", "gate_operand")?)?,
        balance: parse_f64(&manifest, "balance")?,
        init_logit_scale: parse_f64(&manifest, "init_logit_scale")?,
    };
    let has_adapter = manifest.require("model", "has_adapter")? == "1";

    // values are overwritten below; the init seed only shapes the structure
    let mut model = Model::<T>::init(cfg, 0)?;
    if has_adapter {
        model.add_adapter();
    }

    let params = manifest
        .section("params")
        .ok_or_else(|| Error::Checkpoint("manifest has no [params] section".into()))?;
    let declared: usize = manifest
        .require("checkpoint", "param_count")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad checkpoint.param_count".into()))?;
    if declared != model.store.len() || params.entries.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            params.entries.len(),
            model.store.len()
        )));
    }

    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let descriptor = params
            .get(&name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        let (dims_part, frozen_part) = descriptor
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad manifest entry for {name}")))?;
        let dims = parse_dims(
            dims_part
                .strip_prefix("dims=")
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest entry for {name}")))?,
        )?;
        let frozen = match frozen_part.strip_prefix("frozen=") {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(Error::Checkpoint(format!("bad freeze flag for {name}"))),
        };

        let path = dir.join("params").join(format!("{name}.bten"));
        let (value, role) = load_array::<T>(&path)?;
        if role != RoleTag::Param {
            return Err(Error::Checkpoint(format!("{name} stored with role {role:?}")));
        }
        if value.dims() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: manifest dims {dims:?} do not match stored {:?}",
                value.dims()
            )));
        }
        if value.dims() != model.store.get(id).dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored dims {:?} do not fit the model structure {:?}",
                value.dims(),
                model.store.get(id).dims()
            )));
        }
        model.store.set_value(id, value);
        if frozen {
            model.store.set_frozen_prefix(&name, true);
        }
    }
    Ok((model, stage))
}

/// Byte equality of two parameter sets (used by freeze tests).
pub fn params_bytes_equal<T: Real>(a: &ParamStore<T>, b: &ParamStore<T>, prefix: &str) -> bool {
    let pick = |s: &ParamStore<T>| -> Vec<(String, Vec<u8>)> {
        s.entries()
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| {
                let mut buf = Vec::with_capacity(e.value.len() * T::WIDTH);
                for &v in e.value.data() {
                    v.write_le(&mut buf);
                }
                (e.name.clone(), buf)
            })
            .collect()
    };
    pick(a) == pick(b)
}
