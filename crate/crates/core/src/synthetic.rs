//! Seeded synthetic data for tests and demos.
//!
//! [`toy_dataset`] builds feature sequences directly. Bona fide frames
//! scatter around a fixed direction `u`; each spoof cluster shifts that
//! direction along its own axis. Training and dev use three "seen" clusters
//! that move along axes 1..=3. The evaluation split holds two "unseen"
//! clusters that move along axes which stay at noise level everywhere else,
//! so a detector only learns about them through how it treats unfamiliar
//! input.
//!
//! [`audio_fixture`] renders short 16 kHz WAV files (bona fide: low
//! harmonic tones; spoof: noise through a resonance at an attack-specific
//! frequency) together with protocol files, for exercising the whole
//! extract → train → score → evaluate pipeline.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{encode_wav, AudioBuffer, EXPECTED_SAMPLE_RATE};
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::protocol::{serialize_protocol, Key, ProtocolEntry};
use crate::trainer::{Example, InMemorySource};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub dim: usize,
    pub n_bona_train: usize,
    pub n_spoof_train: usize,
    pub n_bona_dev: usize,
    pub n_spoof_dev: usize,
    pub n_bona_eval: usize,
    pub n_spoof_eval: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Per-coordinate frame noise.
    pub noise: f64,
    /// Distance of the seen cluster centres from `u`.
    pub seen_shift: f64,
    /// Distance of the unseen cluster centres from `u`.
    pub unseen_shift: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            n_bona_train: 2000,
            n_spoof_train: 2000,
            n_bona_dev: 500,
            n_spoof_dev: 500,
            n_bona_eval: 500,
            n_spoof_eval: 500,
            min_frames: 12,
            max_frames: 24,
            noise: 0.25,
            seen_shift: 1.0,
            unseen_shift: 1.5,
            seed: 0,
        }
    }
}

pub const SEEN_ATTACKS: [&str; 3] = ["A01", "A02", "A03"];
pub const UNSEEN_ATTACKS: [&str; 2] = ["A04", "A05"];

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: InMemorySource,
    pub dev: InMemorySource,
    pub eval: InMemorySource,
}

fn axis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Cluster centre per attack id; `None` is the bona fide centre `u = e0`.
fn centre(cfg: &ToyConfig, attack: Option<&str>) -> Vec<f64> {
    let d = cfg.dim;
    let u = axis(d, 0);
    let (dir, shift) = match attack {
        None => return u,
        Some("A01") => (axis(d, 1), cfg.seen_shift),
        Some("A02") => (axis(d, 2), cfg.seen_shift),
        Some("A03") => (axis(d, 3), cfg.seen_shift),
        Some("A04") => (axis(d, d - 2), cfg.unseen_shift),
        Some(_) => {
            let s = 0.5f64.sqrt();
            let mut v = vec![0.0; d];
            v[d - 1] = s;
            v[d - 3] = s;
            (v, cfg.unseen_shift)
        }
    };
    u.iter().zip(&dir).map(|(a, b)| a + shift * b).collect()
}

fn sequence<R: Rng>(cfg: &ToyConfig, centre: &[f64], rng: &mut R) -> FeatureMatrix {
    let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let gain = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, cfg.noise).expect("positive noise");
    let data = Array2::from_shape_fn((n, cfg.dim), |(_, j)| gain * centre[j] + noise.sample(rng));
    FeatureMatrix::new(data).expect("finite")
}

fn split<R: Rng>(cfg: &ToyConfig, prefix: &str, n_bona: usize, n_spoof: usize, attacks: &[&str], rng: &mut R) -> InMemorySource {
    let mut examples = Vec::with_capacity(n_bona + n_spoof);
    for i in 0..n_bona + n_spoof {
        let attack = (i >= n_bona).then(|| attacks[(i - n_bona) % attacks.len()]);
        let features = sequence(cfg, &centre(cfg, attack), rng);
        let entry = ProtocolEntry {
            speaker_id: format!("SPK{:03}", i % 20),
            utt_id: format!("{prefix}_{i:05}"),
            attack_id: attack.unwrap_or("-").to_string(),
            key: if attack.is_some() { Key::Spoof } else { Key::Bonafide },
        };
        examples.push(Example { entry, features });
    }
    InMemorySource { examples }
}

pub fn toy_dataset(cfg: &ToyConfig) -> ToyDataset {
    assert!(cfg.dim >= 7, "toy dataset needs at least 7 dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ToyDataset {
        train: split(cfg, "T", cfg.n_bona_train, cfg.n_spoof_train, &SEEN_ATTACKS, &mut rng),
        dev: split(cfg, "D", cfg.n_bona_dev, cfg.n_spoof_dev, &SEEN_ATTACKS, &mut rng),
        eval: split(cfg, "E", cfg.n_bona_eval, cfg.n_spoof_eval, &UNSEEN_ATTACKS, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFixtureConfig {
    pub n_per_class: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for AudioFixtureConfig {
    fn default() -> Self {
        Self { n_per_class: 24, seconds: 0.5, seed: 0 }
    }
}

/// Paths written by [`audio_fixture`], one triple per split.
#[derive(Debug, Clone)]
pub struct FixtureSplit {
    pub name: String,
    pub protocol: PathBuf,
    pub audio_dir: PathBuf,
}

fn render<R: Rng>(attack: Option<usize>, samples: usize, rng: &mut R) -> Vec<f64> {
    let sr = EXPECTED_SAMPLE_RATE as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit");
    match attack {
        None => {
            let f0 = rng.random_range(110.0..220.0);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (0..samples)
                .map(|n| {
                    let t = n as f64 / sr;
                    let voiced: f64 = (1..=6).map(|h| (2.0 * PI * f0 * h as f64 * t + phase).sin() / h as f64).sum();
                    0.25 * voiced + 0.01 * noise.sample(rng)
                })
                .collect()
        }
        Some(k) => {
            // a resonance at an attack-specific frequency over a noise floor
            let fc = 2500.0 + 1500.0 * k as f64 + rng.random_range(-100.0..100.0);
            let (mut y1, mut y2) = (0.0, 0.0);
            let r = 0.98;
            let c = 2.0 * r * (2.0 * PI * fc / sr).cos();
            (0..samples)
                .map(|_| {
                    let y = noise.sample(rng) * 0.02 + c * y1 - r * r * y2;
                    y2 = y1;
                    y1 = y;
                    (0.5 * y).clamp(-0.9, 0.9)
                })
                .collect()
        }
    }
}

/// Writes `<dir>/<split>/<utt>.wav` and `<dir>/<split>.txt` protocols for
/// train, dev and eval. Train and dev use attacks A01–A02, eval adds A03.
pub fn audio_fixture(dir: &Path, cfg: &AudioFixtureConfig) -> Result<Vec<FixtureSplit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (cfg.seconds * EXPECTED_SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::new();
    for (name, attacks) in [("train", &[0usize, 1][..]), ("dev", &[0, 1][..]), ("eval", &[0, 1, 2][..])] {
        let audio_dir = dir.join(name);
        std::fs::create_dir_all(&audio_dir)?;
        let mut entries = Vec::new();
        for i in 0..2 * cfg.n_per_class {
            let attack = (i >= cfg.n_per_class).then(|| attacks[(i - cfg.n_per_class) % attacks.len()]);
            let utt_id = format!("{}_{i:04}", name.to_uppercase());
            let buf = AudioBuffer::new(render(attack, samples, &mut rng), EXPECTED_SAMPLE_RATE)?;
            std::fs::write(audio_dir.join(format!("{utt_id}.wav")), encode_wav(&buf)?)?;
            entries.push(ProtocolEntry {
                speaker_id: format!("SPK{:02}", i % 4),
                utt_id,
                attack_id: attack.map_or("-".to_string(), |k| format!("A{:02}", k + 1)),
                key: if attack.is_some() { Key::Spoof } else { Key::Bonafide },
            });
        }
        let protocol = dir.join(format!("{name}.txt"));
        std::fs::write(&protocol, serialize_protocol(&entries))?;
        out.push(FixtureSplit { name: name.to_string(), protocol, audio_dir });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::FeatureSource;

    #[test]
    fn toy_is_deterministic_and_sized() {
        let cfg = ToyConfig { n_bona_train: 10, n_spoof_train: 9, n_bona_dev: 4, n_spoof_dev: 3, n_bona_eval: 2, n_spoof_eval: 4, ..ToyConfig::default() };
        let a = toy_dataset(&cfg);
        let b = toy_dataset(&cfg);
        assert_eq!(a.train.examples, b.train.examples);
        assert_eq!(a.train.len(), 19);
        assert_eq!(a.eval.len(), 6);
        let unseen: Vec<&str> = (0..a.eval.len()).filter(|&i| a.eval.key(i) == Key::Spoof).map(|i| a.eval.attack_id(i)).collect();
        assert_eq!(unseen, ["A04", "A05", "A04", "A05"]);
        for i in 0..a.train.len() {
            let n = a.train.features(i).unwrap().n_frames();
            assert!((cfg.min_frames..=cfg.max_frames).contains(&n));
        }
    }

    #[test]
    fn cluster_centres_are_at_the_configured_distance() {
        let cfg = ToyConfig::default();
        let u = centre(&cfg, None);
        for a in SEEN_ATTACKS.iter().chain(&UNSEEN_ATTACKS) {
            let c = centre(&cfg, Some(a));
            let d: f64 = c.iter().zip(&u).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let want = if SEEN_ATTACKS.contains(a) { cfg.seen_shift } else { cfg.unseen_shift };
            assert!((d - want).abs() < 1e-12);
        }
    }
}
