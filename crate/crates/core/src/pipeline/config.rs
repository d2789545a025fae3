//! TOML run configuration. Every key has a CLI flag that overrides it;
//! relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Stage};
use crate::discovery::{DEFAULT_PER_PAGE, DEFAULT_RHO};
use crate::embedding::DEFAULT_BATCH_SIZE;
use crate::extract::DEFAULT_MAX_BYTES;
use crate::lora::{LoraConfig, Optimizer, TrainConfig, DEFAULT_LOGIT_SCALE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_root: PathBuf,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { out_root: PathBuf::from("artcontext-run"), seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestSection {
    pub roster: Option<PathBuf>,
    pub topics: Option<PathBuf>,
    pub rho: f64,
    /// Directory of canned API pages; replaces the live client when set.
    pub fixture: Option<PathBuf>,
    pub api_base: Option<String>,
    pub per_page: u32,
    pub max_pages: u32,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub out: Option<PathBuf>,
}

impl Default for HarvestSection {
    fn default() -> Self {
        Self {
            roster: None,
            topics: None,
            rho: DEFAULT_RHO,
            fixture: None,
            api_base: None,
            per_page: DEFAULT_PER_PAGE,
            max_pages: 200,
            max_attempts: 5,
            base_delay_ms: 500,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub works: Option<PathBuf>,
    pub roster: Option<PathBuf>,
    /// Directory of converted documents named `<work_id>.md` (or `.txt`).
    pub corpus: Option<PathBuf>,
    pub max_bytes: u64,
    pub dedup: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { works: None, roster: None, corpus: None, max_bytes: DEFAULT_MAX_BYTES, dedup: false, out: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub contexts: Option<PathBuf>,
    pub provider: String,
    pub batch_size: usize,
    pub out: Option<PathBuf>,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self { contexts: None, provider: "test".into(), batch_size: DEFAULT_BATCH_SIZE, out: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub paintings: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    /// Defaults to the embed provider.
    pub provider: Option<String>,
    pub min_sim: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    /// Generate stand-in encoder features instead of reading exported ones.
    pub synthetic: bool,
    pub paintings: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_embed: usize,
    pub out: Option<PathBuf>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            synthetic: false,
            paintings: None,
            pairs: None,
            contexts: None,
            d_img: 32,
            d_txt: 24,
            d_embed: 16,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pairs: Option<PathBuf>,
    pub img_feats: Option<PathBuf>,
    pub txt_feats: Option<PathBuf>,
    pub img_proj: Option<PathBuf>,
    pub txt_proj: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// SGD with this momentum when set; plain SGD otherwise.
    pub momentum: Option<f64>,
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub logit_scale: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            pairs: None,
            img_feats: None,
            txt_feats: None,
            img_proj: None,
            txt_proj: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: None,
            rank: t.lora.rank,
            alpha: t.lora.alpha,
            dropout: t.lora.dropout_p,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub queries: Option<PathBuf>,
    pub img_feats: Option<PathBuf>,
    /// Text-encoder features of candidate contexts, keyed by context id.
    pub ctx_feats: Option<PathBuf>,
    pub img_proj: Option<PathBuf>,
    pub txt_proj: Option<PathBuf>,
    /// Directory holding `visual.lora` and `text.lora`.
    pub adapters: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub harvest: HarvestSection,
    pub extract: ExtractSection,
    pub embed: EmbedSection,
    pub align: AlignSection,
    pub features: FeaturesSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        rebase(base, p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))
    }

    /// Parses a config file and rebases its relative paths on the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.run.out_root);
        let h = &mut self.harvest;
        for p in [&mut h.roster, &mut h.topics, &mut h.fixture, &mut h.out] {
            rebase_opt(base, p);
        }
        let e = &mut self.extract;
        for p in [&mut e.works, &mut e.roster, &mut e.corpus, &mut e.out] {
            rebase_opt(base, p);
        }
        rebase_opt(base, &mut self.embed.contexts);
        rebase_opt(base, &mut self.embed.out);
        let a = &mut self.align;
        for p in [&mut a.paintings, &mut a.contexts, &mut a.vectors, &mut a.out] {
            rebase_opt(base, p);
        }
        let f = &mut self.features;
        for p in [&mut f.paintings, &mut f.pairs, &mut f.contexts, &mut f.out] {
            rebase_opt(base, p);
        }
        let t = &mut self.train;
        for p in [&mut t.pairs, &mut t.img_feats, &mut t.txt_feats, &mut t.img_proj, &mut t.txt_proj, &mut t.out] {
            rebase_opt(base, p);
        }
        let v = &mut self.eval;
        for p in [
            &mut v.queries,
            &mut v.img_feats,
            &mut v.ctx_feats,
            &mut v.img_proj,
            &mut v.txt_proj,
            &mut v.adapters,
            &mut v.out,
        ] {
            rebase_opt(base, p);
        }
        if let Some(spec) = self.embed.provider.strip_prefix("file:") {
            self.embed.provider = format!("file:{}", base.join(spec).display());
        }
        if let Some(spec) = self.align.provider.as_deref().and_then(|p| p.strip_prefix("file:")) {
            self.align.provider = Some(format!("file:{}", base.join(spec).display()));
        }
    }

    /// Output directory of a stage: its `out` key, else `<out_root>/<stage>`.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let explicit = match stage {
            Stage::Harvest => &self.harvest.out,
            Stage::Extract => &self.extract.out,
            Stage::Embed => &self.embed.out,
            Stage::Align => &self.align.out,
            Stage::Features => &self.features.out,
            Stage::Train => &self.train.out,
            Stage::Eval => &self.eval.out,
        };
        explicit.clone().unwrap_or_else(|| self.run.out_root.join(stage.name()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if !(self.harvest.rho.is_finite() && self.harvest.rho >= 0.0) {
            return bad(format!("rho must be >= 0, got {}", self.harvest.rho));
        }
        if self.harvest.per_page == 0 || self.harvest.max_attempts == 0 {
            return bad("per_page and max_attempts must be positive".into());
        }
        if self.embed.batch_size == 0 {
            return bad("embed batch_size must be positive".into());
        }
        if let Some(t) = self.align.min_sim {
            if !t.is_finite() {
                return bad("min_sim must be finite".into());
            }
        }
        self.train_config().validate().map_err(|e| PipelineError::Validation(e.to_string()))
    }

    /// Checks that every configured user input exists. Single stages only
    /// check the inputs they read.
    pub fn validate_paths(&self) -> Result<(), PipelineError> {
        let paths = [
            &self.harvest.roster,
            &self.harvest.topics,
            &self.harvest.fixture,
            &self.extract.roster,
            &self.extract.corpus,
            &self.align.paintings,
            &self.features.paintings,
            &self.eval.queries,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::Validation(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed.unwrap_or(self.run.seed),
            logit_scale: t.logit_scale,
            optimizer: match t.momentum {
                Some(beta) => Optimizer::Momentum { beta },
                None => Optimizer::Sgd,
            },
            lora: LoraConfig { rank: t.rank, alpha: t.alpha, dropout_p: t.dropout },
        }
    }

    pub fn align_provider(&self) -> &str {
        self.align.provider.as_deref().unwrap_or(&self.embed.provider)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg =
            PipelineConfig::from_toml("[run]\nseed = 11\n[harvest]\nrho = 2.0\n[train]\nmomentum = 0.9\n").unwrap();
        assert_eq!(cfg.harvest.rho, 2.0);
        assert_eq!(cfg.train_config().seed, 11);
        assert_eq!(cfg.train_config().optimizer, Optimizer::Momentum { beta: 0.9 });
        assert_eq!(cfg.embed.provider, "test");
        assert_eq!(cfg.stage_dir(Stage::Embed), PathBuf::from("artcontext-run/embed"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml("[harvest]\nrh0 = 1.0\n"), Err(PipelineError::Validation(_))));
    }

    #[test]
    fn relative_paths_rebase_on_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.toml");
        fs::write(
            &p,
            "[run]\nout_root = \"out\"\n[harvest]\nroster = \"r.jsonl\"\n[embed]\nprovider = \"file:v.emb\"\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.run.out_root, dir.path().join("out"));
        assert_eq!(cfg.harvest.roster, Some(dir.path().join("r.jsonl")));
        assert_eq!(cfg.embed.provider, format!("file:{}", dir.path().join("v.emb").display()));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = PipelineConfig::default();
        cfg.harvest.rho = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.harvest.roster = Some(PathBuf::from("/nonexistent/roster.jsonl"));
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_paths().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }
}
