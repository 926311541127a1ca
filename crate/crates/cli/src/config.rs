use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bubblelab::attacks::{AttackConfig, AttackLoss};
use bubblelab::channel::ChannelConfig;
use bubblelab::data::DatasetSpec;
use bubblelab::impact::RaceParams;
use bubblelab::seed::derive_seed;
use bubblelab::training::TrainConfig;
use bubblelab::PrecisionMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{GlobalArgs, Precision};

/// Error classes with their exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Usage,
    Config,
    Data,
    Divergence,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Usage => 1,
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Divergence => 4,
        }
    }

    /// Divergence anywhere in the chain wins; otherwise the outermost tag.
    pub fn of(err: &anyhow::Error) -> Self {
        let diverged = err.chain().any(|e| {
            matches!(
                e.downcast_ref::<bubblelab::Error>(),
                Some(bubblelab::Error::Divergence { .. })
            )
        });
        if diverged {
            return Failure::Divergence;
        }
        err.downcast_ref::<Failure>().copied().unwrap_or(Failure::Usage)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Usage => "usage error",
            Failure::Config => "invalid config",
            Failure::Data => "input data error",
            Failure::Divergence => "numeric divergence",
        })
    }
}

impl std::error::Error for Failure {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Svm,
    SimpleCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: DatasetSpec,
    /// Fresh bubbles drawn for evaluation, attacks and diagnostics.
    pub eval_bubbles: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            eval_bubbles: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: ModelKind,
    /// Training recipe; the architecture's preset when absent.
    pub train: Option<TrainConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: ModelKind::Svm,
            train: None,
        }
    }
}

impl ModelSection {
    pub fn recipe(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| match self.architecture {
            ModelKind::Svm => TrainConfig::svm(),
            ModelKind::SimpleCnn => TrainConfig::simple_cnn_gray_b(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub settings: AttackConfig,
    /// Budgets in units of 1/255.
    pub epsilons_255: Vec<u32>,
    pub losses: Vec<AttackLoss>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            settings: AttackConfig::apgd(AttackLoss::BinaryDlr, 1.0),
            epsilons_255: bubblelab::attacks::DEFAULT_EPSILONS_255.to_vec(),
            losses: vec![AttackLoss::CrossEntropy, AttackLoss::BinaryDlr],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Probe settings; method and early stopping are fixed by the probe.
    pub settings: AttackConfig,
    /// Precision labels: f64, f32, tf32, optionally with `-ftz`.
    pub modes: Vec<String>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            settings: AttackConfig::pgd_reference(),
            modes: vec!["f64".into(), "f32".into(), "tf32".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub settings: ChannelConfig,
    /// Clean bubbles sent through the channel for evaluation.
    pub test_bubbles: usize,
    /// Training set of the classifier used when no model file is given.
    pub classifier_data: DatasetSpec,
    /// Clean bubbles behind the denoiser pairs (each gives one channel pair
    /// and one identity pair); 0 skips the denoiser.
    pub denoiser_bubbles: usize,
    pub denoiser_train: TrainConfig,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            settings: ChannelConfig::default(),
            test_bubbles: 1000,
            classifier_data: DatasetSpec::swatch_heavy(200),
            denoiser_bubbles: 1000,
            denoiser_train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::denoiser()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpactSection {
    pub race: RaceParams,
    pub ballots: u64,
    /// Optional race table (race_id,total_votes,margin_fraction,blank_fraction).
    pub races_csv: Option<PathBuf>,
    pub races_label: String,
}

impl Default for ImpactSection {
    fn default() -> Self {
        Self {
            race: RaceParams::default(),
            ballots: 1_000_000,
            races_csv: None,
            races_label: "races".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub diagnose: DiagnoseSection,
    pub channel: ChannelSection,
    pub impact: ImpactSection,
    pub output: OutputSection,
}

/// Stage indices for seed derivation.
pub mod stage {
    pub const DATA: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const DIAGNOSE: u64 = 4;
    pub const CHANNEL: u64 = 5;
    pub const IMPACT: u64 = 6;
}

/// Parses a config, naming the offending key as a JSON pointer on error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(&e.path().to_string());
        anyhow::Error::new(e.into_inner())
            .context(format!("at {pointer}"))
            .context(Failure::Config)
    })
}

fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".into();
    }
    path.replace('[', ".")
        .replace(']', "")
        .split('.')
        .filter(|seg| !seg.is_empty())
        .map(|seg| format!("/{}", seg.replace('~', "~0").replace('/', "~1")))
        .collect()
}

/// Config after file loading and command-line overrides.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Resolved {
    pub fn load(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .context(Failure::Config)?;
                parse_config(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        if let Some(p) = global.precision {
            let mode = match p {
                Precision::F64 => PrecisionMode::FULL64,
                Precision::F32 => PrecisionMode::STANDARD32,
                Precision::Tf32 => PrecisionMode::REDUCED32,
            }
            .with_flush_to_zero(global.flush_to_zero && p != Precision::F64);
            config.set_precision(mode);
        } else if global.flush_to_zero {
            return Err(anyhow::anyhow!("--flush-to-zero needs --precision f32 or tf32")
                .context(Failure::Usage));
        }
        config.derive_seeds();
        config.validate().context(Failure::Config)?;
        let out = global
            .out
            .clone()
            .or_else(|| config.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let hash = config.hash();
        Ok(Self { config, hash, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }
}

impl ExperimentConfig {
    fn set_precision(&mut self, mode: PrecisionMode) {
        let mut recipe = self.model.recipe();
        recipe.precision = mode;
        self.model.train = Some(recipe);
        self.attack.settings.precision = mode;
        self.diagnose.modes = vec![mode.label().to_string()];
    }

    /// Stage seeds follow the global seed, so one number pins a run.
    fn derive_seeds(&mut self) {
        let s = self.seed;
        if let Some(t) = &mut self.model.train {
            t.seed = derive_seed(s, &[stage::TRAIN]);
        }
        self.attack.settings.seed = derive_seed(s, &[stage::ATTACK]);
        self.diagnose.settings.seed = derive_seed(s, &[stage::DIAGNOSE]);
        self.channel.settings.seed = derive_seed(s, &[stage::CHANNEL]);
        self.channel.denoiser_train.seed = derive_seed(s, &[stage::CHANNEL, 1]);
    }

    pub fn train_recipe(&self) -> TrainConfig {
        let mut r = self.model.recipe();
        r.seed = derive_seed(self.seed, &[stage::TRAIN]);
        r
    }

    pub fn modes(&self) -> Result<Vec<PrecisionMode>> {
        self.diagnose
            .modes
            .iter()
            .map(|m| {
                PrecisionMode::from_label(m)
                    .with_context(|| format!("at /diagnose/modes: unknown precision `{m}`"))
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        self.data.dataset.validate().context("at /data/dataset")?;
        self.train_recipe().validate().context("at /model/train")?;
        self.attack.settings.validate().context("at /attack/settings")?;
        if self.attack.epsilons_255.iter().any(|&e| e > 255) {
            anyhow::bail!("at /attack/epsilons_255: budgets must be at most 255");
        }
        if self.attack.losses.is_empty() {
            anyhow::bail!("at /attack/losses: need at least one loss");
        }
        self.diagnose.settings.validate().context("at /diagnose/settings")?;
        self.modes()?;
        self.channel.settings.validate().context("at /channel/settings")?;
        self.channel.classifier_data.validate().context("at /channel/classifier_data")?;
        self.channel.denoiser_train.validate().context("at /channel/denoiser_train")?;
        self.impact.race.validate().context("at /impact/race")?;
        if self.impact.ballots == 0 {
            anyhow::bail!("at /impact/ballots: need at least one ballot");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .with_context(|| format!("missing input {}", path.display()))
        .context(Failure::Data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointers() {
        assert_eq!(json_pointer("attack.settings.epsilon"), "/attack/settings/epsilon");
        assert_eq!(json_pointer("attack.losses[1]"), "/attack/losses/1");
        assert_eq!(json_pointer("."), "/");
    }

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config(r#"{"attack": {"settings": {"epsilonn": 0.1}}}"#).unwrap_err();
        assert_eq!(Failure::of(&err), Failure::Config);
        assert!(format!("{err:#}").contains("/attack/settings"), "{err:#}");
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
