//! ASVspoof-style protocol files and fixed-length batching of feature matrices.
//!
//! A protocol line has five whitespace-separated fields:
//! `speaker utt_id <unused> attack_id key`, e.g. `LA_0079 LA_T_1138215 - - bonafide`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Attack id used for bona fide trials.
pub const BONAFIDE_ATTACK: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    /// Class label: 0 for the bona fide target class, 1 for spoof.
    pub fn label(self) -> u8 {
        match self {
            Key::Bonafide => 0,
            Key::Spoof => 1,
        }
    }

    pub fn from_label(y: u8) -> Self {
        if y == 0 {
            Key::Bonafide
        } else {
            Key::Spoof
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            _ => Err(format!("unknown key `{s}` (expected bonafide or spoof)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker_id: String,
    pub utt_id: String,
    pub attack_id: String,
    pub key: Key,
}

impl ProtocolEntry {
    pub fn is_bonafide(&self) -> bool {
        self.key == Key::Bonafide
    }
}

pub fn parse_protocol(text: &str) -> Result<Vec<ProtocolEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Protocol {
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let key: Key = fields[4]
            .parse()
            .map_err(|msg| Error::Protocol { line: line_no, msg })?;
        let attack_id = fields[3].to_string();
        if (key == Key::Bonafide) != (attack_id == BONAFIDE_ATTACK) {
            return Err(Error::Protocol {
                line: line_no,
                msg: format!("key {key} inconsistent with attack id `{attack_id}`"),
            });
        }
        let utt_id = fields[1].to_string();
        if !seen.insert(utt_id.clone()) {
            return Err(Error::Protocol {
                line: line_no,
                msg: format!("duplicate utterance id `{utt_id}`"),
            });
        }
        entries.push(ProtocolEntry {
            speaker_id: fields[0].to_string(),
            utt_id,
            attack_id,
            key,
        });
    }
    Ok(entries)
}

/// Inverse of [`parse_protocol`]; the unused third field is written as `-`.
pub fn serialize_protocol(entries: &[ProtocolEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{} {} - {} {}\n", e.speaker_id, e.utt_id, e.attack_id, e.key));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Dev,
    Eval,
}

impl SplitName {
    /// Bona fide / spoof utterance counts of the ASVspoof 2019 LA partitions.
    pub fn la2019_counts(self) -> (usize, usize) {
        match self {
            SplitName::Train => (2_580, 22_800),
            SplitName::Dev => (2_548, 22_296),
            SplitName::Eval => (7_355, 63_882),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Eval => "eval",
        }
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "eval" => Ok(SplitName::Eval),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    entries: Vec<ProtocolEntry>,
    counts: (usize, usize),
}

impl DatasetSplit {
    pub fn new(name: SplitName, entries: Vec<ProtocolEntry>) -> Self {
        let n_bona = entries.iter().filter(|e| e.is_bonafide()).count();
        let counts = (n_bona, entries.len() - n_bona);
        Self { name, entries, counts }
    }

    pub fn entries(&self) -> &[ProtocolEntry] {
        &self.entries
    }

    /// `(n_bonafide, n_spoof)`.
    pub fn counts(&self) -> (usize, usize) {
        self.counts
    }

    pub fn attacks(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.is_bonafide())
            .map(|e| e.attack_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitReport {
    pub pass: bool,
    pub actual: (usize, usize),
    pub expected: (usize, usize),
    /// actual − expected, per class.
    pub delta: (i64, i64),
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: bonafide {} (expected {}, delta {:+}), spoof {} (expected {}, delta {:+})",
            if self.pass { "PASS" } else { "FAIL" },
            self.actual.0,
            self.expected.0,
            self.delta.0,
            self.actual.1,
            self.expected.1,
            self.delta.1
        )
    }
}

pub fn validate_split(split: &DatasetSplit, expected: (usize, usize)) -> SplitReport {
    let actual = split.counts();
    let delta = (
        actual.0 as i64 - expected.0 as i64,
        actual.1 as i64 - expected.1 as i64,
    );
    SplitReport { pass: actual == expected, actual, expected, delta }
}

/// Repeat-pad or crop to exactly `target_len` frames, drawing the crop offset
/// uniformly from `[0, n_frames - target_len]`.
pub fn fix_length<R: Rng + ?Sized>(
    frames: &FeatureMatrix,
    target_len: usize,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let offset = if frames.n_frames() > target_len {
        rng.random_range(0..=frames.n_frames() - target_len)
    } else {
        0
    };
    fix_length_at(frames, target_len, offset)
}

/// Deterministic variant of [`fix_length`] with an explicit crop offset.
/// The offset is ignored when the input needs padding.
pub fn fix_length_at(frames: &FeatureMatrix, target_len: usize, offset: usize) -> Result<FeatureMatrix> {
    if target_len == 0 {
        return Err(Error::InvalidInput("target length must be at least one frame".into()));
    }
    let n = frames.n_frames();
    let src = frames.view();
    if n == target_len {
        return Ok(frames.clone());
    }
    if n > target_len {
        if offset > n - target_len {
            return Err(Error::InvalidInput(format!(
                "crop offset {offset} out of range for {n} frames"
            )));
        }
        return FeatureMatrix::new(src.slice(s![offset..offset + target_len, ..]).to_owned());
    }
    let mut out = Array2::zeros((target_len, frames.n_dims()));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&src.row(t % n));
    }
    FeatureMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, dims: usize) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|t| vec![t as f64; dims]).collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn parses_bonafide_line() {
        let entries = parse_protocol("LA_0079 LA_T_1138215 - - bonafide\n").unwrap();
        assert_eq!(
            entries,
            vec![ProtocolEntry {
                speaker_id: "LA_0079".into(),
                utt_id: "LA_T_1138215".into(),
                attack_id: "-".into(),
                key: Key::Bonafide,
            }]
        );
    }

    #[test]
    fn key_is_case_insensitive() {
        let e = parse_protocol("S1 U1 x A01 SPOOF\nS1 U2 x - BonaFide").unwrap();
        assert_eq!(e[0].key, Key::Spoof);
        assert_eq!(e[1].key, Key::Bonafide);
    }

    #[test]
    fn four_fields_reports_line() {
        let text = "S1 U1 - - bonafide\n\nS1 U2 - A01\n";
        match parse_protocol(text) {
            Err(Error::Protocol { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_duplicates_rejected() {
        assert!(matches!(
            parse_protocol("S U - A01 fake"),
            Err(Error::Protocol { line: 1, .. })
        ));
        assert!(matches!(
            parse_protocol("S U - - bonafide\nS U - A01 spoof"),
            Err(Error::Protocol { line: 2, .. })
        ));
        assert!(parse_protocol("S U - A01 bonafide").is_err());
    }

    #[test]
    fn synthetic_counts_match_line_scan() {
        let mut text = String::new();
        for i in 0..10 {
            if i % 3 == 0 {
                text.push_str(&format!("SPK U{i} - - bonafide\n"));
            } else {
                text.push_str(&format!("SPK U{i} - A0{} spoof\n", i % 3));
            }
        }
        // independent scan of the raw text
        let scan = text.lines().fold((0, 0), |(b, s), l| {
            if l.ends_with("bonafide") { (b + 1, s) } else { (b, s + 1) }
        });
        assert_eq!(scan, (4, 6));
        let split = DatasetSplit::new(SplitName::Train, parse_protocol(&text).unwrap());
        assert_eq!(split.counts(), scan);
        assert_eq!(split.attacks(), vec!["A01".to_string(), "A02".to_string()]);
    }

    #[test]
    fn validate_reports_delta() {
        let mut text = String::new();
        for i in 0..3 {
            text.push_str(&format!("S B{i} - - bonafide\n"));
        }
        for i in 0..7 {
            text.push_str(&format!("S P{i} - A01 spoof\n"));
        }
        let split = DatasetSplit::new(SplitName::Dev, parse_protocol(&text).unwrap());
        assert!(validate_split(&split, (3, 7)).pass);
        let r = validate_split(&split, (3, 8));
        assert!(!r.pass);
        assert_eq!(r.delta, (0, -1));
    }

    #[test]
    fn repeat_padding() {
        let fm = ramp(3, 2);
        let out = fix_length_at(&fm, 7, 0).unwrap();
        let firsts: Vec<f64> = out.view().column(0).to_vec();
        assert_eq!(firsts, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn equal_length_is_identity() {
        let fm = ramp(750, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(fix_length(&fm, 750, &mut rng).unwrap(), fm);
    }

    #[test]
    fn random_crop_matches_reference_draw() {
        let fm = ramp(1000, 1);
        let seed = 42;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = fix_length(&fm, 750, &mut rng).unwrap();
        let mut oracle = ChaCha8Rng::seed_from_u64(seed);
        let offset: usize = oracle.random_range(0..=250);
        let expected: Vec<f64> = (offset..offset + 750).map(|t| t as f64).collect();
        assert_eq!(out.view().column(0).to_vec(), expected);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(fix_length_at(&ramp(3, 1), 0, 0).is_err());
    }

    fn entry_strategy() -> impl Strategy<Value = (String, String, Option<u8>)> {
        ("[A-Z]{2}_[0-9]{4}", "[A-Za-z0-9_]{1,12}", proptest::option::of(1u8..20))
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(raw in proptest::collection::vec(entry_strategy(), 0..30)) {
            let mut seen = HashSet::new();
            let entries: Vec<ProtocolEntry> = raw
                .into_iter()
                .enumerate()
                .filter(|(_, (_, u, _))| seen.insert(u.clone()))
                .map(|(_, (spk, utt, attack))| ProtocolEntry {
                    speaker_id: spk,
                    utt_id: utt,
                    attack_id: attack.map_or("-".to_string(), |a| format!("A{a:02}")),
                    key: if attack.is_some() { Key::Spoof } else { Key::Bonafide },
                })
                .collect();
            prop_assert_eq!(parse_protocol(&serialize_protocol(&entries)).unwrap(), entries);
        }

        #[test]
        fn fix_length_shape_and_tiling(n in 1usize..60, target in 1usize..120, seed in any::<u64>()) {
            let fm = ramp(n, 2);
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let out = fix_length(&fm, target, &mut a).unwrap();
            prop_assert_eq!(out.n_frames(), target);
            prop_assert_eq!(&out, &fix_length(&fm, target, &mut b).unwrap());
            if n < target {
                for t in 0..target {
                    prop_assert_eq!(out.frame(t)[0], (t % n) as f64);
                }
            }
        }
    }
}
