//! Run configuration: an optional JSON file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use dfsp_core::data::{generate, load_embeddings, load_manifest, Manifest, SyntheticSpec};
use dfsp_core::eval::{Phi, DEFAULT_THRESHOLD};
use dfsp_core::space::World;
use dfsp_core::trainer::TrainConfig;
use dfsp_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DFSP_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "dfsp-runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Manifest directory. Exactly one of `data` and `synthetic` is set.
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub world: World,
    pub threshold: f64,
    /// Word vectors for open-world feasibility; the learned prompt rows
    /// are used when absent.
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            synthetic: None,
            world: World::Closed,
            threshold: DEFAULT_THRESHOLD,
            embeddings: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold must be finite, got {}",
                self.threshold
            )));
        }
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "give either a manifest directory or a synthetic spec, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "no data source: pass --data DIR or --synthetic SPEC".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn load_data(&self) -> Result<Manifest> {
        match (&self.data, &self.synthetic) {
            (Some(dir), None) => load_manifest(dir),
            (None, Some(spec)) => Ok(generate(spec)?.0),
            _ => {
                self.validate()?;
                unreachable!("validate rejects ambiguous data sources")
            }
        }
    }

    pub fn phi(&self, manifest: &Manifest) -> Result<Phi> {
        match &self.embeddings {
            None => Ok(Phi::Learned),
            Some(p) => {
                let (states, objects) = load_embeddings(p, manifest.states(), manifest.objects())?;
                Ok(Phi::External { states, objects })
            }
        }
    }

    /// `--out`, then the config file's `output`, then
    /// `$DFSP_OUTPUT_ROOT/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        self.output.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUTPUT_ROOT_VAR)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            root.join(command)
        })
    }
}

/// Parses `key=value` pairs separated by commas. Keys: `n`/`states`,
/// `m`/`objects`, `dim`, `spp`/`samples_per_pair`, `sigma`/`noise`,
/// `unseen`/`unseen_fraction`, `seed`. The word `default` alone gives the
/// default spec.
pub fn parse_synthetic(text: &str) -> std::result::Result<SyntheticSpec, String> {
    let mut spec = SyntheticSpec::default();
    let text = text.trim();
    if text.is_empty() || text == "default" {
        return Ok(spec);
    }
    for item in text.split(',') {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found {item:?}"))?;
        let (key, value) = (key.trim(), value.trim());
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| format!("{key}: not a non-negative integer: {value:?}"))
        };
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| format!("{key}: not a number: {value:?}"))
        };
        match key {
            "n" | "states" => spec.states = int()?,
            "m" | "objects" => spec.objects = int()?,
            "dim" => spec.dim = int()?,
            "spp" | "samples_per_pair" => spec.samples_per_pair = int()?,
            "sigma" | "noise" => spec.noise = float()?,
            "unseen" | "unseen_fraction" => spec.unseen_fraction = float()?,
            "seed" => {
                spec.seed = value
                    .parse()
                    .map_err(|_| format!("seed: not an integer: {value:?}"))?
            }
            _ => return Err(format!("unknown synthetic key {key:?}")),
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spec_strings() {
        let s = parse_synthetic("n=4, m=6,sigma=0.1,seed=3").unwrap();
        assert_eq!((s.states, s.objects, s.noise, s.seed), (4, 6, 0.1, 3));
        assert_eq!(
            s.samples_per_pair,
            SyntheticSpec::default().samples_per_pair
        );
        assert_eq!(
            parse_synthetic("default").unwrap(),
            SyntheticSpec::default()
        );
        assert!(parse_synthetic("n=4,q=1").is_err());
        assert!(parse_synthetic("n").is_err());
        assert!(parse_synthetic("n=-1").is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let cfg = RunConfig {
            synthetic: Some(SyntheticSpec::default()),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig =
            serde_json::from_str(r#"{"train": {"alpha": 0.5}, "world": "open"}"#).unwrap();
        assert_eq!(partial.train.alpha, 0.5);
        assert_eq!(partial.world, World::Open);
        assert_eq!(partial.threshold, 0.4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn exactly_one_data_source() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.synthetic = Some(SyntheticSpec::default());
        assert!(cfg.validate().is_ok());
        cfg.data = Some("x".into());
        assert!(cfg.validate().is_err());
    }
}
