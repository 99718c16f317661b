//! `ocspoof`: extract LFCC features, train, score, evaluate and project.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numeric failure (divergence, non-finite values, degenerate input).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rayon::prelude::*;

use ocspoof_core::audio::{DecoderRegistry, EXPECTED_SAMPLE_RATE};
use ocspoof_core::checkpoint::Checkpoint;
use ocspoof_core::config::{config_hash, lfcc_hash, RunConfig, SplitPaths};
use ocspoof_core::lfcc::LfccExtractor;
use ocspoof_core::metrics::{evaluate, format_scores, join_scores, parse_scores, TdcfCosts};
use ocspoof_core::pca::{pca_project, FitOn};
use ocspoof_core::protocol::{parse_protocol, validate_split, DatasetSplit, ProtocolEntry, SplitName};
use ocspoof_core::synthetic::{audio_fixture, AudioFixtureConfig};
use ocspoof_core::trainer::{embed_all, log_csv, score_all, train, CacheDirSource, FeatureSource, TrainError};
use ocspoof_core::{Error, ErrorKind};

/// Config used by `ocspoof synth`, written next to the generated fixture.
pub const TOY_CONFIG: &str = include_str!("../../../configs/toy_fixture.toml");

const MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "ocspoof", version, about = "One-class spoofing countermeasure pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Eval,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Dev => SplitName::Dev,
            SplitArg::Eval => SplitName::Eval,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FitArg {
    All,
    Bonafide,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decode audio listed in the protocols and write LFCC feature caches.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Splits to process (repeatable); default: train, dev and eval.
        #[arg(long = "split", value_enum)]
        splits: Vec<SplitArg>,
    },
    /// Train on the train split, selecting the epoch with the lowest dev EER.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.ocsp and train_log.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `utt_id score` lines for one split.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER, min t-DCF and per-attack EER from a score file and a protocol.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// TOML file with t-DCF priors, costs and ASV error rates.
        #[arg(long)]
        costs: Option<PathBuf>,
        /// Run config; its `[eval.tdcf]` section is used when --costs is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report.csv, per_attack.csv, det.csv and report.txt.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// System name in the printed table.
        #[arg(long, default_value = "CM")]
        label: String,
    },
    /// PCA of embeddings: fit on one split, project several with the same transform.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dev")]
        fit_split: SplitArg,
        /// Splits to project (repeatable); default: dev and eval.
        #[arg(long = "split", value_enum)]
        splits: Vec<SplitArg>,
        /// Fit on all embeddings or bona fide only; default from `[eval] pca_fit`.
        #[arg(long, value_enum)]
        fit_on: Option<FitArg>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a small synthetic WAV corpus with protocols and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        n_per_class: usize,
    },
}

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(msg: String) -> Failure {
    Failure { code: 1, message: format!("config error: {msg}") }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn hash_line(hash: &str) -> String {
    format!("# config-hash: {hash}\n")
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let _ = e.print();
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Extract { config, splits } => extract(&config, &splits),
        Command::Train { config, out } => train_cmd(&config, &out),
        Command::Score { config, checkpoint, split, out } => score_cmd(&config, &checkpoint, split.into(), &out),
        Command::Evaluate { scores, protocol, costs, config, out_dir, label } => {
            evaluate_cmd(&scores, &protocol, costs.as_deref(), config.as_deref(), out_dir.as_deref(), &label)
        }
        Command::Project { config, checkpoint, fit_split, splits, fit_on, out_dir } => {
            project_cmd(&config, &checkpoint, fit_split.into(), &splits, fit_on, &out_dir)
        }
        Command::Synth { out, seed, n_per_class } => synth_cmd(&out, seed, n_per_class),
    }
}

struct Loaded {
    cfg: RunConfig,
    hash: String,
}

fn load_config(path: &Path) -> CliResult<Loaded> {
    if !path.is_file() {
        return Err(config_err(format!("config file {} does not exist", path.display())));
    }
    let text = read(path).map_err(|f| config_err(f.message))?;
    let hash = config_hash(&text)?;
    let cfg = RunConfig::load(path)?;
    Ok(Loaded { cfg, hash })
}

fn split_paths(cfg: &RunConfig, split: SplitName) -> CliResult<SplitPaths> {
    let paths = cfg.data.split(split)?;
    if !paths.protocol.is_file() {
        return Err(config_err(format!("{} protocol {} does not exist", split.as_str(), paths.protocol.display())));
    }
    Ok(paths)
}

fn load_protocol(path: &Path) -> CliResult<Vec<ProtocolEntry>> {
    parse_protocol(&read(path)?).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })
}

fn extract(config: &Path, splits: &[SplitArg]) -> CliResult<()> {
    let Loaded { cfg, hash } = load_config(config)?;
    let names: Vec<SplitName> = if splits.is_empty() {
        vec![SplitName::Train, SplitName::Dev, SplitName::Eval]
    } else {
        splits.iter().map(|s| (*s).into()).collect()
    };
    let paths: Vec<SplitPaths> = names.iter().map(|n| split_paths(&cfg, *n)).collect::<CliResult<_>>()?;
    for p in &paths {
        if !p.audio_dir.is_dir() {
            return Err(config_err(format!("audio directory {} does not exist", p.audio_dir.display())));
        }
    }
    let ext = cfg.data.audio_ext().to_string();
    let registry = DecoderRegistry::default();
    if !registry.supports(&ext) {
        return Err(config_err(format!("no decoder for audio extension `{ext}`")));
    }
    let extractor = LfccExtractor::new(&cfg.lfcc, EXPECTED_SAMPLE_RATE)?;
    let lfcc = lfcc_hash(&cfg.lfcc)?;

    for p in paths {
        let entries = load_protocol(&p.protocol)?;
        let split = DatasetSplit::new(p.name, entries);
        if cfg.data.check_counts {
            let report = validate_split(&split, p.name.la2019_counts());
            println!("{} split counts: {report}", p.name.as_str());
            if !report.pass {
                return Err(Failure { code: 2, message: format!("{} split does not match the corpus counts", p.name.as_str()) });
            }
        }
        std::fs::create_dir_all(&p.cache_dir).map_err(|e| io_err(&p.cache_dir, e))?;
        let results: Vec<ocspoof_core::Result<()>> = split
            .entries()
            .par_iter()
            .map(|e| {
                let audio = registry.load(&p.audio_dir.join(format!("{}.{ext}", e.utt_id)))?;
                let feats = extractor.extract(&audio)?;
                feats.write_cache(&p.cache_dir.join(format!("{}.lfcc", e.utt_id)))
            })
            .collect();
        // report the first failure in protocol order
        results.into_iter().collect::<ocspoof_core::Result<Vec<()>>>()?;
        let manifest = format!("{}lfcc-hash: {lfcc}\nutterances: {}\n", hash_line(&hash), split.entries().len());
        write(&p.cache_dir.join(MANIFEST), &manifest)?;
        println!("{}: {} utterances -> {}", p.name.as_str(), split.entries().len(), p.cache_dir.display());
    }
    Ok(())
}

/// Feature source for a split whose cache was built with the current `[lfcc]` settings.
fn cached_source(cfg: &RunConfig, split: SplitName) -> CliResult<CacheDirSource> {
    let p = split_paths(cfg, split)?;
    let manifest_path = p.cache_dir.join(MANIFEST);
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|_| {
        config_err(format!("no feature cache for {} (missing {}); run `ocspoof extract` first", split.as_str(), manifest_path.display()))
    })?;
    let want = format!("lfcc-hash: {}", lfcc_hash(&cfg.lfcc)?);
    if !manifest.lines().any(|l| l == want) {
        return Err(config_err(format!(
            "feature cache {} was built with different [lfcc] settings; rerun `ocspoof extract`",
            p.cache_dir.display()
        )));
    }
    Ok(CacheDirSource { entries: load_protocol(&p.protocol)?, dir: p.cache_dir })
}

fn train_cmd(config: &Path, out: &Path) -> CliResult<()> {
    let Loaded { cfg, hash } = load_config(config)?;
    let train_src = cached_source(&cfg, SplitName::Train)?;
    let dev_src = cached_source(&cfg, SplitName::Dev)?;
    let ckpt_path = out.join("checkpoint.ocsp");
    let log_path = out.join("train_log.csv");
    match train(&train_src, &dev_src, &cfg.model, &cfg.train) {
        Ok(outcome) => {
            let mut best = outcome.best;
            best.config_hash = hash.clone();
            write(&log_path, &(hash_line(&hash) + &log_csv(&outcome.log)))?;
            std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            best.save(&ckpt_path)?;
            println!(
                "best epoch {} with dev EER {}% -> {}",
                best.epoch,
                ocspoof_core::metrics::sig4(100.0 * best.dev_eer),
                ckpt_path.display()
            );
            Ok(())
        }
        Err(TrainError::Failed(e)) => Err(e.into()),
        Err(TrainError::Diverged(d)) => {
            let mut last = d.last_good;
            last.config_hash = hash.clone();
            write(&log_path, &(hash_line(&hash) + &log_csv(&d.log)))?;
            std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            last.save(&ckpt_path)?;
            Err(Failure {
                code: 3,
                message: format!(
                    "training diverged in epoch {}: {}; last good checkpoint (epoch {}) written to {}",
                    d.epoch,
                    d.message,
                    last.epoch,
                    ckpt_path.display()
                ),
            })
        }
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(config_err(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.net_config.input_dim != cfg.lfcc.n_dims() {
        return Err(config_err(format!(
            "checkpoint expects {}-dim features but [lfcc] produces {}",
            ckpt.net_config.input_dim,
            cfg.lfcc.n_dims()
        )));
    }
    Ok(ckpt)
}

fn score_cmd(config: &Path, checkpoint: &Path, split: SplitName, out: &Path) -> CliResult<()> {
    let Loaded { cfg, hash } = load_config(config)?;
    let ckpt = load_checkpoint(checkpoint, &cfg)?;
    let src = cached_source(&cfg, split)?;
    let records = score_all(&ckpt.model, &src, ckpt.train_config.target_len)?;
    let pairs: Vec<(String, f64)> = records.into_iter().map(|r| (r.utt_id, r.score)).collect();
    write(out, &(hash_line(&hash) + &format_scores(&pairs)))?;
    println!("{} scores -> {}", pairs.len(), out.display());
    Ok(())
}

fn header_hash(text: &str) -> Option<String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# config-hash: ").map(str::to_string))
}

fn evaluate_cmd(
    scores: &Path,
    protocol: &Path,
    costs: Option<&Path>,
    config: Option<&Path>,
    out_dir: Option<&Path>,
    label: &str,
) -> CliResult<()> {
    for p in [scores, protocol].into_iter().chain(costs) {
        if !p.is_file() {
            return Err(config_err(format!("{} does not exist", p.display())));
        }
    }
    let loaded = config.map(load_config).transpose()?;
    let tdcf = match (costs, &loaded) {
        (Some(path), _) => TdcfCosts::from_toml(&read(path)?)?,
        (None, Some(l)) => l.cfg.eval.tdcf.clone(),
        (None, None) => TdcfCosts::default(),
    };
    let score_text = read(scores)?;
    let hash = match &loaded {
        Some(l) => l.hash.clone(),
        None => header_hash(&score_text).unwrap_or_else(|| "none".to_string()),
    };
    let parsed = parse_scores(&score_text).map_err(|e| Failure { code: 2, message: format!("{}: {e}", scores.display()) })?;
    let entries = load_protocol(protocol)?;
    let records = join_scores(&parsed, &entries)?;
    let expected: Vec<String> = DatasetSplit::new(SplitName::Eval, entries).attacks();
    let report = evaluate(&records, &tdcf, &expected)?;
    let table = report.render_table(label);
    print!("{table}");
    if let Some(dir) = out_dir {
        let h = hash_line(&hash);
        write(&dir.join("report.csv"), &(h.clone() + &report.summary_csv()))?;
        write(&dir.join("per_attack.csv"), &(h.clone() + &report.per_attack_csv()))?;
        write(&dir.join("det.csv"), &(h.clone() + &report.det_csv()))?;
        write(&dir.join("report.txt"), &(h + &table))?;
    }
    Ok(())
}

fn stack(rows: &[ndarray::Array1<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut r, e) in m.rows_mut().into_iter().zip(rows) {
        r.assign(e);
    }
    m
}

fn project_cmd(
    config: &Path,
    checkpoint: &Path,
    fit_split: SplitName,
    splits: &[SplitArg],
    fit_on: Option<FitArg>,
    out_dir: &Path,
) -> CliResult<()> {
    let Loaded { cfg, hash } = load_config(config)?;
    let ckpt = load_checkpoint(checkpoint, &cfg)?;
    let fit_on = match fit_on {
        Some(FitArg::All) => FitOn::All,
        Some(FitArg::Bonafide) => FitOn::BonafideOnly,
        None => cfg.eval.pca_fit.into(),
    };
    let targets: Vec<SplitName> = if splits.is_empty() {
        vec![SplitName::Dev, SplitName::Eval]
    } else {
        splits.iter().map(|s| (*s).into()).collect()
    };
    let dim = ckpt.net_config.embed_dim;
    let len = ckpt.train_config.target_len;

    let fit_src = cached_source(&cfg, fit_split)?;
    let fit_emb = stack(&embed_all(&ckpt.model.net, &fit_src, len)?, dim);
    let labels: Vec<_> = (0..fit_src.len()).map(|i| fit_src.key(i)).collect();
    let (pca, _) = pca_project(fit_emb.view(), &labels, fit_on)?;

    let mut comp = hash_line(&hash);
    let _ = writeln!(comp, "# fit-split: {}", fit_split.as_str());
    let _ = writeln!(comp, "component,explained_variance,{}", (0..dim).map(|i| format!("w{i}")).collect::<Vec<_>>().join(","));
    for (k, row) in pca.components.rows().into_iter().enumerate() {
        let ws: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(comp, "pc{},{},{}", k + 1, pca.explained_variance[k], ws.join(","));
    }
    write(&out_dir.join("projection_components.csv"), &comp)?;

    for split in targets {
        let src = cached_source(&cfg, split)?;
        let emb = stack(&embed_all(&ckpt.model.net, &src, len)?, dim);
        let pts = pca.transform(emb.view())?;
        let mut out = hash_line(&hash);
        out.push_str("utt_id,key,attack_id,pc1,pc2\n");
        for i in 0..src.len() {
            let _ = writeln!(out, "{},{},{},{},{}", src.utt_id(i), src.key(i), src.attack_id(i), pts[[i, 0]], pts[[i, 1]]);
        }
        let path = out_dir.join(format!("projection_{}.csv", split.as_str()));
        write(&path, &out)?;
        println!("{}: {} points -> {}", split.as_str(), src.len(), path.display());
    }
    Ok(())
}

fn synth_cmd(out: &Path, seed: u64, n_per_class: usize) -> CliResult<()> {
    if n_per_class < 2 {
        return Err(config_err("--n-per-class must be at least 2".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let splits = audio_fixture(out, &AudioFixtureConfig { n_per_class, seed, ..AudioFixtureConfig::default() })?;
    write(&out.join("config.toml"), TOY_CONFIG)?;
    for s in splits {
        println!("{}: {} and {}", s.name, s.protocol.display(), s.audio_dir.display());
    }
    println!("config: {}", out.join("config.toml").display());
    Ok(())
}
