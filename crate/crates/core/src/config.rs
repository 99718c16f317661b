//! Run configuration: one TOML file with `[data]`, `[lfcc]`, `[model]`,
//! `[train]` and `[eval]` sections. Unknown keys are rejected.
//!
//! Relative paths are resolved against the directory of the config file.
//! The config hash is the SHA-256 of the canonical re-serialization of the
//! parsed file (before path resolution), so it does not depend on
//! formatting, comments or where the run directory lives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lfcc::LfccConfig;
use crate::metrics::TdcfCosts;
use crate::net::NetConfig;
use crate::pca::FitOn;
use crate::protocol::SplitName;
use crate::trainer::TrainConfig;

/// Standard directory layout of the ASVspoof 2019 LA release.
pub const LA2019_LAYOUT: &str = "asvspoof2019_la";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root. With `layout = "asvspoof2019_la"` any protocol or audio
    /// path left unset is filled in from the standard release layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_protocol: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_protocol: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_protocol: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_audio: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_audio: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_audio: Option<PathBuf>,
    /// Audio file extension (`flac` for the corpus, `wav` for fixtures).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_ext: Option<String>,
    /// Directory for `<split>/<utt_id>.lfcc` feature caches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Compare split sizes against the published LA 2019 counts on extract.
    pub check_counts: bool,
}

/// Locations of one split after defaults and path resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPaths {
    pub name: SplitName,
    pub protocol: PathBuf,
    pub audio_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl DataConfig {
    pub fn audio_ext(&self) -> &str {
        self.audio_ext.as_deref().unwrap_or("flac")
    }

    fn layout_paths(&self, split: SplitName) -> Option<(PathBuf, PathBuf)> {
        if self.layout.as_deref() != Some(LA2019_LAYOUT) {
            return None;
        }
        let root = self.root.as_ref()?;
        let (part, proto) = match split {
            SplitName::Train => ("train", "ASVspoof2019.LA.cm.train.trn.txt"),
            SplitName::Dev => ("dev", "ASVspoof2019.LA.cm.dev.trl.txt"),
            SplitName::Eval => ("eval", "ASVspoof2019.LA.cm.eval.trl.txt"),
        };
        Some((
            root.join("ASVspoof2019_LA_cm_protocols").join(proto),
            root.join(format!("ASVspoof2019_LA_{part}")).join("flac"),
        ))
    }

    /// Protocol, audio and cache locations for `split`.
    pub fn split(&self, split: SplitName) -> Result<SplitPaths> {
        let (protocol, audio) = match split {
            SplitName::Train => (&self.train_protocol, &self.train_audio),
            SplitName::Dev => (&self.dev_protocol, &self.dev_audio),
            SplitName::Eval => (&self.eval_protocol, &self.eval_audio),
        };
        let layout = self.layout_paths(split);
        let name = split.as_str();
        let protocol = protocol
            .clone()
            .or_else(|| layout.as_ref().map(|l| l.0.clone()))
            .ok_or_else(|| Error::Config(format!("[data] {name}_protocol is not set")))?;
        let audio_dir = audio
            .clone()
            .or_else(|| layout.as_ref().map(|l| l.1.clone()))
            .ok_or_else(|| Error::Config(format!("[data] {name}_audio is not set")))?;
        let cache_dir = self.cache_dir.clone().unwrap_or_else(|| PathBuf::from("features")).join(name);
        Ok(SplitPaths { name: split, protocol, audio_dir, cache_dir })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for p in [
            &mut self.root,
            &mut self.train_protocol,
            &mut self.dev_protocol,
            &mut self.eval_protocol,
            &mut self.train_audio,
            &mut self.dev_audio,
            &mut self.eval_audio,
            &mut self.cache_dir,
        ] {
            fix(p);
        }
        if self.cache_dir.is_none() {
            self.cache_dir = Some(base.join("features"));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaFit {
    #[default]
    All,
    Bonafide,
}

impl From<PcaFit> for FitOn {
    fn from(p: PcaFit) -> Self {
        match p {
            PcaFit::All => FitOn::All,
            PcaFit::Bonafide => FitOn::BonafideOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tdcf: TdcfCosts,
    /// Which dev embeddings the PCA projection is fitted on.
    pub pca_fit: PcaFit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub lfcc: LfccConfig,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, validate, and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data.resolve(&base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lfcc.validate(crate::audio::EXPECTED_SAMPLE_RATE)?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.tdcf.weights()?;
        if self.model.input_dim != self.lfcc.n_dims() {
            return Err(Error::Config(format!(
                "[model] input_dim = {} but [lfcc] produces {} dims",
                self.model.input_dim,
                self.lfcc.n_dims()
            )));
        }
        if let Some(layout) = &self.data.layout {
            if layout != LA2019_LAYOUT {
                return Err(Error::Config(format!("[data] unknown layout `{layout}` (known: {LA2019_LAYOUT})")));
            }
            if self.data.root.is_none() {
                return Err(Error::Config("[data] layout needs root".into()));
            }
        }
        Ok(())
    }

    /// Canonical TOML of the parsed config.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical form of `text`, which must be a valid config.
pub fn config_hash(text: &str) -> Result<String> {
    Ok(sha256_hex(RunConfig::from_toml(text)?.canonical()?.as_bytes()))
}

/// Hash of the `[lfcc]` section only; feature caches depend on nothing else.
pub fn lfcc_hash(cfg: &LfccConfig) -> Result<String> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nbatchsize = 3\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        assert!(RunConfig::from_toml("[eval.tdcf]\np_spoof = 0.5\n").is_err());
        assert!(RunConfig::from_toml("[model]\ninput_dim = 20\n").is_err());
        assert!(RunConfig::from_toml("[lfcc]\ninclude_deltas = false\n[model]\ninput_dim = 20\n").is_ok());
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = config_hash("[train]\nepochs = 5\n").unwrap();
        let b = config_hash("# comment\n[train]\n  epochs   =   5\n").unwrap();
        let c = config_hash("[train]\nepochs = 6\n").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn canonical_round_trips() {
        let cfg = RunConfig::from_toml("[model]\nhidden_dims = [8, 4]\n[train]\nlr_head = 0.1\n").unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.canonical().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn corpus_layout_paths() {
        let mut cfg = RunConfig::from_toml("[data]\nroot = \"LA\"\nlayout = \"asvspoof2019_la\"\n").unwrap();
        cfg.data.resolve(Path::new("/corpus"));
        let dev = cfg.data.split(SplitName::Dev).unwrap();
        assert_eq!(dev.protocol, Path::new("/corpus/LA/ASVspoof2019_LA_cm_protocols/ASVspoof2019.LA.cm.dev.trl.txt"));
        assert_eq!(dev.audio_dir, Path::new("/corpus/LA/ASVspoof2019_LA_dev/flac"));
        assert_eq!(dev.cache_dir, Path::new("/corpus/features/dev"));
        assert!(RunConfig::from_toml("[data]\nlayout = \"asvspoof2019_la\"\n").is_err());
        assert!(RunConfig::default().data.split(SplitName::Train).is_err());
    }
}
