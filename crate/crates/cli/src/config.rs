//! Run configuration: profile defaults, then the `--config` file, then flags.
//! The resolved result is written into every output directory together with
//! a SHA-256 over the config and the input files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmpib_core::experiment::ExperimentConfig;
use tmpib_core::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Desk-scale sizes.
    #[default]
    Full,
    /// Smaller grid sequences and networks for quick runs.
    Small,
}

impl Profile {
    pub fn defaults(self) -> ExperimentConfig {
        match self {
            Self::Full => ExperimentConfig::default(),
            Self::Small => ExperimentConfig::small(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Plan {
    Pathology,
    RotationI,
    RotationII,
    RotationTest,
}

/// Shape of both the `--config` file and the resolved copy. Every field is
/// optional in the input file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub plan: Option<Plan>,
    pub variant: Option<String>,
    pub beta: Option<f64>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub splits: Option<Vec<String>>,
    pub experiment: Option<ExperimentConfig>,
}

fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

/// Overwrites `base` with `over`, recursing into tables.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads `path`, filling `experiment` from the profile defaults so the file
/// may override single nested keys.
pub fn load(path: Option<&Path>, profile_flag: Option<Profile>) -> Result<RunConfig> {
    let Some(path) = path else {
        let profile = profile_flag.unwrap_or_default();
        return Ok(RunConfig {
            profile: Some(profile),
            experiment: Some(profile.defaults()),
            ..RunConfig::default()
        });
    };
    let text = fs::read_to_string(path)?;
    let mut raw: toml::Table =
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let over = raw.remove("experiment");
    let mut cfg: RunConfig = toml::Value::Table(raw)
        .try_into()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let profile = profile_flag.or(cfg.profile).unwrap_or_default();
    let mut exp = toml::Value::try_from(profile.defaults())
        .map_err(|e| invalid(format!("profile defaults: {e}")))?;
    if let Some(over) = over {
        merge(&mut exp, over);
    }
    cfg.experiment = Some(
        exp.try_into()
            .map_err(|e| invalid(format!("{} [experiment]: {e}", path.display())))?,
    );
    cfg.profile = Some(profile);
    Ok(cfg)
}

/// Every regular file under `dir`, sorted by path.
fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hex SHA-256 over the config text and each input file's relative path
/// and bytes.
pub fn input_hash(config_text: &str, inputs: &[(String, PathBuf)]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    for (label, root) in inputs {
        let mut files = Vec::new();
        if root.is_dir() {
            files_under(root, &mut files)?;
        } else {
            files.push(root.clone());
        }
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(format!("\0{label}/{}\0", rel.display()).as_bytes());
            h.update(fs::read(&f)?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `config_<command>.toml` and `inputs_<command>.sha256` into `dir`.
pub fn record_run(dir: &Path, cfg: &RunConfig, inputs: &[(String, PathBuf)]) -> Result<()> {
    let command = cfg.command.clone().unwrap_or_else(|| "run".into());
    let text = toml::to_string(cfg).map_err(|e| invalid(format!("serializing config: {e}")))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("config_{command}.toml")), &text)?;
    let hash = input_hash(&text, inputs)?;
    fs::write(
        dir.join(format!("inputs_{command}.sha256")),
        format!("{hash}\n"),
    )?;
    Ok(())
}
