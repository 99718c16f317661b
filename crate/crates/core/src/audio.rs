//! Audio ingestion. PCM16 mono WAV is built in; other containers (the corpus
//! ships FLAC) plug in through [`AudioDecoder`].

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const EXPECTED_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Audio("audio buffer is empty".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Turns an encoded file into samples.
pub trait AudioDecoder: Send + Sync {
    fn decode(&self, bytes: &[u8]) -> Result<AudioBuffer>;
}

/// RIFF WAV, 16-bit PCM, mono.
#[derive(Debug, Default, Clone, Copy)]
pub struct WavDecoder;

impl AudioDecoder for WavDecoder {
    fn decode(&self, bytes: &[u8]) -> Result<AudioBuffer> {
        let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Audio(e.to_string()))?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Audio(format!(
                "expected 16-bit PCM, got {:?} {} bit",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        if spec.channels != 1 {
            return Err(Error::Audio(format!("expected mono, got {} channels", spec.channels)));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Audio(e.to_string()))?;
        AudioBuffer::new(samples, spec.sample_rate)
    }
}

/// FLAC, any bit depth, mono. The native format of the ASVspoof 2019 LA
/// corpus.
#[derive(Debug, Default, Clone, Copy)]
pub struct FlacDecoder;

impl AudioDecoder for FlacDecoder {
    fn decode(&self, bytes: &[u8]) -> Result<AudioBuffer> {
        let mut reader = claxon::FlacReader::new(Cursor::new(bytes)).map_err(|e| Error::Audio(e.to_string()))?;
        let info = reader.streaminfo();
        if info.channels != 1 {
            return Err(Error::Audio(format!("expected mono, got {} channels", info.channels)));
        }
        let scale = (1u64 << (info.bits_per_sample - 1)) as f64;
        let samples = reader
            .samples()
            .map(|s| s.map(|v| v as f64 / scale))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Audio(e.to_string()))?;
        AudioBuffer::new(samples, info.sample_rate)
    }
}

/// Encode as PCM16 mono WAV. Samples are clamped to [-1, 1].
pub fn encode_wav(audio: &AudioBuffer) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(|e| Error::Audio(e.to_string()))?;
        for &s in &audio.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| Error::Audio(e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::Audio(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

/// Decoders keyed by lowercase file extension.
pub struct DecoderRegistry {
    decoders: BTreeMap<String, Box<dyn AudioDecoder>>,
}

impl Default for DecoderRegistry {
    fn default() -> Self {
        let mut reg = Self { decoders: BTreeMap::new() };
        reg.register("wav", Box::new(WavDecoder));
        reg.register("flac", Box::new(FlacDecoder));
        reg
    }
}

impl DecoderRegistry {
    pub fn register(&mut self, ext: &str, decoder: Box<dyn AudioDecoder>) {
        self.decoders.insert(ext.to_ascii_lowercase(), decoder);
    }

    pub fn supports(&self, ext: &str) -> bool {
        self.decoders.contains_key(&ext.to_ascii_lowercase())
    }

    /// Decode a file and require the 16 kHz rate; nothing is resampled.
    pub fn load(&self, path: &Path) -> Result<AudioBuffer> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let decoder = self
            .decoders
            .get(&ext)
            .ok_or_else(|| Error::Audio(format!("no decoder registered for `.{ext}` ({})", path.display())))?;
        let bytes = std::fs::read(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let audio = decoder.decode(&bytes)?;
        if audio.sample_rate != EXPECTED_SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "{}: sample rate {} Hz, expected {EXPECTED_SAMPLE_RATE} Hz",
                path.display(),
                audio.sample_rate
            )));
        }
        Ok(audio)
    }
}
