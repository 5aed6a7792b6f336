//! Run configuration: a JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use mmdit_core::atlas::UnionMode;
use mmdit_core::bench::BenchShape;
use mmdit_core::edit::{block_prefix_preset, EditConfig, ReplaceMode};
use mmdit_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::fail::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `default`, `sd3_toy`, `sd35m_toy` or `flux_toy`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_preset: Option<String>,
    /// Path to a JSON `ModelConfig`, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_config: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Path to a JSON `EditConfig`, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit_config: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditConfig>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_prompt: Option<String>,
    /// Inversion controller strength; 1 when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Real latent blob for `invert` and `edit-real`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<PathBuf>,
    /// Inverted latent blob for `edit-real`; computed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverted: Option<PathBuf>,
    /// Extra thresholds for `edit`, each run as an isolated job.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub theta_sweep: Vec<f64>,
    pub analyze: AnalyzeConfig,
    pub select: SelectConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Sampling steps to dump; first, middle and last when empty.
    pub steps: Vec<usize>,
    pub pca_k: usize,
    /// Also write per-head quadrant blobs.
    pub dump_quadrants: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            pca_k: 6,
            dump_quadrants: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    #[default]
    Synthetic,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub scenes: usize,
    pub k: usize,
    pub sigma: f64,
    pub predictor: Predictor,
    /// Flow time of the forward pass used by the model predictor.
    pub t: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            scenes: 32,
            k: 5,
            sigma: 1.5,
            predictor: Predictor::Synthetic,
            t: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub shapes: Vec<BenchShape>,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![BenchShape::TINY, BenchShape::PRODUCTION],
            runs: 5,
        }
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mask threshold; also turns local blending on.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub tau_frac: Option<f64>,
    #[arg(long)]
    pub blend_stop_frac: Option<f64>,
    #[arg(long, value_enum)]
    pub replace_mode: Option<ModeArg>,
    /// Number of leading blocks to inject, or a preset name.
    #[arg(long)]
    pub block_prefix: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub mask_blocks: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub union: Option<UnionArg>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta_rev: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Qk,
    I2i,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum UnionArg {
    Both,
    Source,
}

/// Everything a command needs, with file references already loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub edit: EditConfig,
    pub gamma: f64,
    pub out: PathBuf,
    base: PathBuf,
}

impl Resolved {
    /// A path from the config, taken relative to the config file.
    pub fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn absolute(&self, p: &Path) -> PathBuf {
        let p = self.path(p);
        std::path::absolute(&p).unwrap_or(p)
    }

    /// The config with every reference inlined, as written next to results.
    pub fn snapshot(&self) -> RunConfig {
        RunConfig {
            model_preset: None,
            model_config: None,
            model: Some(self.model.clone()),
            edit_config: None,
            edit: Some(self.edit.clone()),
            gamma: Some(self.gamma),
            out: None,
            latent: self.run.latent.as_ref().map(|p| self.absolute(p)),
            inverted: self.run.inverted.as_ref().map(|p| self.absolute(p)),
            ..self.run.clone()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

fn model_preset(name: &str) -> Option<ModelConfig> {
    match name {
        "default" => Some(ModelConfig::default()),
        "sd3_toy" => Some(ModelConfig::sd3_toy()),
        "sd35m_toy" => Some(ModelConfig::sd35m_toy()),
        "flux_toy" => Some(ModelConfig::flux_toy()),
        _ => None,
    }
}

fn parse_prefix(s: &str) -> Result<usize, CliError> {
    s.parse()
        .ok()
        .or_else(|| block_prefix_preset(s))
        .ok_or_else(|| CliError::usage(format!("--block-prefix {s:?} is neither a number nor a preset")))
}

pub fn resolve(flags: &Overrides) -> Result<Resolved, CliError> {
    let run: RunConfig = read_json(&flags.config, "config")?;
    let base = flags
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let sources = [run.model_preset.is_some(), run.model_config.is_some(), run.model.is_some()];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(CliError::usage("set at most one of model_preset, model_config and model"));
    }
    let model = if let Some(name) = &run.model_preset {
        model_preset(name).ok_or_else(|| CliError::usage(format!("unknown model preset {name:?}")))?
    } else if let Some(p) = &run.model_config {
        read_json(&base.join(p), "model config")?
    } else {
        run.model.clone().unwrap_or_default()
    };
    model.validate().map_err(CliError::from_core_usage)?;

    if run.edit_config.is_some() && run.edit.is_some() {
        return Err(CliError::usage("set at most one of edit_config and edit"));
    }
    let mut edit = match &run.edit_config {
        Some(p) => read_json(&base.join(p), "edit config")?,
        None => run.edit.clone().unwrap_or_default(),
    };
    if let Some(v) = flags.theta {
        edit.theta = Some(v);
        edit.local_blend = true;
    }
    if let Some(v) = flags.tau_frac {
        edit.tau_frac = v;
    }
    if let Some(v) = flags.blend_stop_frac {
        edit.blend_stop_frac = v;
    }
    if let Some(m) = flags.replace_mode {
        edit.replace_mode = match m {
            ModeArg::Qk => ReplaceMode::QkProj,
            ModeArg::I2i => ReplaceMode::I2iBlock,
            ModeArg::Full => ReplaceMode::FullMap,
        };
    }
    if let Some(p) = &flags.block_prefix {
        edit.replace_block_prefix = Some(parse_prefix(p)?);
    }
    if let Some(b) = &flags.mask_blocks {
        edit.mask_blocks = b.clone();
    }
    if let Some(u) = flags.union {
        edit.union_mode = match u {
            UnionArg::Both => UnionMode::BothBranches,
            UnionArg::Source => UnionMode::SourceOnly,
        };
    }
    if let Some(v) = flags.eta_rev {
        edit.eta_rev = v;
    }
    if let Some(v) = flags.steps {
        edit.steps = v;
    }
    edit.validate(model.depth).map_err(CliError::from_core_usage)?;

    let gamma = flags.gamma.or(run.gamma).unwrap_or(1.0);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CliError::usage(format!("gamma = {gamma} outside [0, 1]")));
    }
    let mut run = run;
    if let Some(s) = flags.seed {
        run.seed = s;
    }
    let out = match (&flags.out, &run.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => PathBuf::from("mmdit-out"),
    };
    Ok(Resolved {
        run,
        model,
        edit,
        gamma,
        out,
        base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn flags(config: PathBuf) -> Overrides {
        Overrides {
            config,
            ..Overrides::default()
        }
    }


    #[test]
    fn unknown_keys_are_usage_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        let c = write(d, "run.json", r#"{"seed": 1, "colour": "red"}"#);
        let e = resolve(&flags(c)).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let c = write(d, "nested.json", r#"{"edit": {"tau": 0.3}}"#);
        assert_eq!(resolve(&flags(c)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn flags_override_file_values() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        write(d, "edit.json", r#"{"tau_frac": 0.5, "steps": 10}"#);
        let c = write(d, "run.json", r#"{"model_preset": "flux_toy", "edit_config": "edit.json", "seed": 3}"#);
        let mut f = flags(c);
        f.steps = Some(6);
        f.theta = Some(0.4);
        f.replace_mode = Some(ModeArg::I2i);
        f.block_prefix = Some("2".into());
        f.mask_blocks = Some(vec![1, 3]);
        f.union = Some(UnionArg::Source);
        f.seed = Some(9);
        let r = resolve(&f).unwrap();
        assert_eq!(r.model, ModelConfig::flux_toy());
        assert_eq!(r.edit.tau_frac, 0.5);
        assert_eq!(r.edit.steps, 6);
        assert_eq!(r.edit.theta, Some(0.4));
        assert!(r.edit.local_blend);
        assert_eq!(r.edit.replace_mode, ReplaceMode::I2iBlock);
        assert_eq!(r.edit.replace_block_prefix, Some(2));
        assert_eq!(r.edit.mask_blocks, vec![1, 3]);
        assert_eq!(r.edit.union_mode, UnionMode::SourceOnly);
        assert_eq!(r.run.seed, 9);
        assert_eq!(r.gamma, 1.0);
    }

    #[test]
    fn prefix_presets_and_conflicts() {
        assert_eq!(parse_prefix("flux-schnell").unwrap(), 38);
        assert_eq!(parse_prefix("7").unwrap(), 7);
        assert!(parse_prefix("huge").is_err());
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        let c = write(d, "run.json", r#"{"model_preset": "sd3_toy", "model": {}}"#);
        assert_eq!(resolve(&flags(c)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn snapshot_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        let c = write(d, "run.json", r#"{"model_preset": "sd3_toy", "prompt": "a cat"}"#);
        let r = resolve(&flags(c)).unwrap();
        let snap = r.snapshot();
        let text = serde_json::to_string(&snap).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.model, Some(ModelConfig::sd3_toy()));
    }
}
