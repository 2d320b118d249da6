//! Declarative pipeline configuration (TOML). Command-line flags override
//! file values.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builders::{ContrastCaptionConfig, MergeConfig, Placement};
use crate::interleave::{InterleaveFormat, TokenBudget};
use crate::synth::SynthSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McqSettings {
    /// Answers that are rewritten as lettered options.
    pub labels: Vec<String>,
}

impl Default for McqSettings {
    fn default() -> Self {
        McqSettings {
            labels: vec!["True".into(), "False".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiVqaSettings {
    pub images_min: usize,
    pub images_max: usize,
    pub n_items: usize,
    pub placeholder_position: Placement,
    pub id_prefix: String,
    pub source: String,
}

impl Default for MultiVqaSettings {
    fn default() -> Self {
        MultiVqaSettings {
            images_min: 2,
            images_max: 6,
            n_items: 100,
            placeholder_position: Placement::RandomPerItem,
            id_prefix: "multivqa".into(),
            source: "multi-vqa".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub global_seed: Option<u64>,
    pub format: InterleaveFormat,
    pub budget: TokenBudget,
    pub merge: MergeConfig,
    pub contrast: ContrastCaptionConfig,
    pub mcq: McqSettings,
    pub synth: SynthSettings,
    pub multivqa: MultiVqaSettings,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.format.validate()?;
        self.budget.validate()?;
        Ok(())
    }

    /// SHA-256 over the effective settings. Paths are excluded so the same
    /// configuration hashes identically wherever it runs.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let cfg: PipelineConfig = toml::from_str(
            r#"
global_seed = 7
[format]
boi = "<img>"
eoi = "</img>"
[budget]
context_len = 4096
tokens_per_image = 64
[merge]
k_max = 3
placeholder_position = "begin_first_question"
[mcq]
labels = ["yes", "no"]
"#,
        )
        .unwrap();
        assert_eq!(cfg.global_seed, Some(7));
        assert_eq!(cfg.format.boi, "<img>");
        assert_eq!(cfg.format.slot_template, InterleaveFormat::default().slot_template);
        assert_eq!(cfg.budget.reserved_text, 0);
        assert_eq!(cfg.merge.k_max, 3);
        assert_eq!(cfg.merge.k_min, 2);
        assert_eq!(cfg.merge.placeholder_position, Placement::BeginFirstQuestion);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_builder_seeds() {
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<PipelineConfig>("[merge]\nseed = 3").is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.output = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.global_seed = Some(1);
        assert_ne!(a.hash(), b.hash());
    }
}
