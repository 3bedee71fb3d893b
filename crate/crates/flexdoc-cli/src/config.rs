//! Run configuration: a typed key tree loaded from TOML or JSON with flag
//! overrides applied on top. Unknown keys are hard errors so hyperparameter
//! typos cannot pass silently.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flexdoc::model::ModelConfig;
use flexdoc::synth::GeneratorConfig;
use flexdoc::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPaths {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; when set it overrides the training and generator seeds.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Directory holding schema.json / train.jsonl / val.jsonl / test.jsonl
    /// (written by `generate`); explicit corpus paths take precedence.
    pub data_dir: Option<PathBuf>,
    pub corpus: CorpusPaths,
    pub tasks: Vec<String>,
    /// Field-masking probability of the RANDOM task.
    pub random_p: f64,
    /// Rayon worker threads (0 = library default).
    pub workers: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs/out"),
            data_dir: None,
            corpus: CorpusPaths::default(),
            tasks: vec!["ELEM".into(), "POS".into(), "ATTR".into(), "IMG".into(), "TXT".into()],
            random_p: 0.15,
            workers: 0,
            init_checkpoint: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).with_context(|| format!("bad JSON config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("bad TOML config {}", path.display()))?
        };
        Ok(cfg)
    }

    /// Applies the master seed to the training and generator sub-configs.
    pub fn propagate_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.generator.seed = seed;
        }
    }

    pub fn resolved_corpus_paths(&self) -> Result<(PathBuf, PathBuf, PathBuf, PathBuf)> {
        let from_dir = |name: &str| self.data_dir.as_ref().map(|d| d.join(name));
        let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
            match explicit.clone().or_else(|| from_dir(name)) {
                Some(p) => Ok(p),
                None => bail!("no path for {name}: set corpus.{} or data_dir", name.trim_end_matches(".jsonl").trim_end_matches(".json")),
            }
        };
        Ok((
            pick(&self.corpus.schema, "schema.json")?,
            pick(&self.corpus.train, "train.jsonl")?,
            pick(&self.corpus.val, "val.jsonl")?,
            pick(&self.corpus.test, "test.jsonl")?,
        ))
    }

    pub fn parsed_tasks(&self) -> Result<Vec<flexdoc::mask::TaskSpec>> {
        let mut out = Vec::new();
        for name in &self.tasks {
            let mut task: flexdoc::mask::TaskSpec = name
                .parse()
                .with_context(|| format!("bad task name `{name}` in tasks list"))?;
            if let flexdoc::mask::TaskSpec::Random { p } = &mut task {
                *p = self.random_p;
            }
            out.push(task);
        }
        if out.is_empty() {
            bail!("empty task list");
        }
        Ok(out)
    }

    /// Writes the full effective configuration (after flag overrides) into
    /// the output directory for reproducibility.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effective_config.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
