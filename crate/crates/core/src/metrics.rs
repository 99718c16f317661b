//! Countermeasure evaluation: DET curve, equal error rate, minimum
//! normalized tandem detection cost (t-DCF), and per-attack EER.
//!
//! Conventions:
//! - higher scores mean "more bona fide";
//! - at threshold `s`, a spoof trial with score `>= s` is a false alarm and
//!   a bona fide trial with score `< s` is a miss;
//! - the DET grid is every distinct score plus `+inf`, so it always runs
//!   from `(P_fa, P_miss) = (1, 0)` to `(0, 1)`;
//! - the EER is read off the DET polyline by linear interpolation between
//!   the two grid points that bracket `P_fa = P_miss`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Key, ProtocolEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub key: Key,
    pub attack_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub fa: f64,
    pub miss: f64,
    pub threshold: f64,
}

/// Bona fide and spoof scores, each sorted ascending.
struct Split {
    bona: Vec<f64>,
    spoof: Vec<f64>,
}

impl Split {
    fn new(scores: &[ScoreRecord]) -> Result<Self> {
        let mut bona = Vec::new();
        let mut spoof = Vec::new();
        for r in scores {
            if !r.score.is_finite() {
                return Err(Error::NonFinite(format!("score of {}", r.utt_id)));
            }
            match r.key {
                Key::Bonafide => bona.push(r.score),
                Key::Spoof => spoof.push(r.score),
            }
        }
        if bona.is_empty() || spoof.is_empty() {
            return Err(Error::InvalidInput(format!(
                "need both classes, got {} bona fide and {} spoof scores",
                bona.len(),
                spoof.len()
            )));
        }
        bona.sort_by(f64::total_cmp);
        spoof.sort_by(f64::total_cmp);
        Ok(Self { bona, spoof })
    }

    fn curve(&self) -> Vec<DetPoint> {
        let mut thresholds: Vec<f64> = self.bona.iter().chain(&self.spoof).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        let (nb, ns) = (self.bona.len() as f64, self.spoof.len() as f64);
        thresholds
            .into_iter()
            .map(|t| {
                let miss = self.bona.partition_point(|s| *s < t) as f64 / nb;
                let fa = (self.spoof.len() - self.spoof.partition_point(|s| *s < t)) as f64 / ns;
                DetPoint { fa, miss, threshold: t }
            })
            .collect()
    }
}

/// DET points sorted by threshold ascending; `P_fa` is non-increasing and
/// `P_miss` non-decreasing along the list.
pub fn det_curve(scores: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    Ok(Split::new(scores)?.curve())
}

fn eer_from_curve(curve: &[DetPoint]) -> (f64, f64) {
    for (i, p) in curve.iter().enumerate() {
        let gap = p.fa - p.miss;
        if gap == 0.0 {
            return (p.fa, p.threshold);
        }
        if gap < 0.0 {
            // curve[0] has gap 1, so i >= 1 here
            let q = &curve[i - 1];
            let prev_gap = q.fa - q.miss;
            let lambda = prev_gap / (prev_gap - gap);
            let rate = q.fa + lambda * (p.fa - q.fa);
            let threshold = if p.threshold.is_finite() {
                q.threshold + lambda * (p.threshold - q.threshold)
            } else {
                q.threshold
            };
            return (rate, threshold);
        }
    }
    unreachable!("DET curve ends at (0, 1)")
}

/// Equal error rate and the (interpolated) threshold where it is attained.
pub fn eer(scores: &[ScoreRecord]) -> Result<(f64, f64)> {
    Ok(eer_from_curve(&det_curve(scores)?))
}

/// Cost model of the tandem detection cost function. The ASV error rates
/// describe the fixed ASV system at its operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfCosts {
    pub p_tar: f64,
    pub p_non: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfCosts {
    /// Priors and costs of the ASVspoof 2019 evaluation plan. The three ASV
    /// rates are placeholders; supply the ones measured on the ASV scores of
    /// the partition being evaluated.
    fn default() -> Self {
        Self {
            p_tar: 0.95 * 0.99,
            p_non: 0.95 * 0.01,
            p_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_miss_asv: 0.025,
            p_fa_asv: 0.025,
            p_miss_spoof_asv: 0.5,
        }
    }
}

impl TdcfCosts {
    /// Costs from a TOML file with the field names above; missing fields
    /// keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let costs: Self = toml::from_str(text).map_err(|e| Error::Config(format!("t-DCF costs: {e}")))?;
        costs.weights()?;
        Ok(costs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("t-DCF costs: {m}")));
        for (name, p) in [("p_tar", self.p_tar), ("p_non", self.p_non), ("p_spoof", self.p_spoof)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} = {p} outside (0, 1)"));
            }
        }
        let total = self.p_tar + self.p_non + self.p_spoof;
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {total}, not 1"));
        }
        for (name, c) in [
            ("c_miss_asv", self.c_miss_asv),
            ("c_fa_asv", self.c_fa_asv),
            ("c_miss_cm", self.c_miss_cm),
            ("c_fa_cm", self.c_fa_cm),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return bad(format!("{name} = {c} must be non-negative"));
            }
        }
        for (name, r) in [
            ("p_miss_asv", self.p_miss_asv),
            ("p_fa_asv", self.p_fa_asv),
            ("p_miss_spoof_asv", self.p_miss_spoof_asv),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Weights of the CM miss and false-alarm rates in the t-DCF.
    pub fn weights(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let c1 = self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
            - self.p_non * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv);
        if c1 <= 0.0 || c2 <= 0.0 {
            return Err(Error::Config(format!(
                "invalid ASV operating point: C1 = {c1}, C2 = {c2} (both must be positive)"
            )));
        }
        Ok((c1, c2))
    }
}

fn min_tdcf_from_curve(curve: &[DetPoint], c1: f64, c2: f64) -> (f64, f64) {
    let norm = c1.min(c2);
    curve
        .iter()
        .map(|p| ((c1 * p.miss + c2 * p.fa) / norm, p.threshold))
        .fold((f64::INFINITY, f64::NAN), |best, cur| if cur.0 < best.0 { cur } else { best })
}

/// Minimum over the DET grid of `(C1·P_miss + C2·P_fa) / min(C1, C2)`.
pub fn min_tdcf(scores: &[ScoreRecord], costs: &TdcfCosts) -> Result<(f64, f64)> {
    let (c1, c2) = costs.weights()?;
    Ok(min_tdcf_from_curve(&det_curve(scores)?, c1, c2))
}

/// EER of each attack against all bona fide trials.
pub fn per_attack_eer(scores: &[ScoreRecord]) -> Result<BTreeMap<String, f64>> {
    Split::new(scores)?;
    let bona: Vec<ScoreRecord> = scores.iter().filter(|r| r.key == Key::Bonafide).cloned().collect();
    let mut by_attack: BTreeMap<&str, Vec<ScoreRecord>> = BTreeMap::new();
    for r in scores.iter().filter(|r| r.key == Key::Spoof) {
        by_attack.entry(r.attack_id.as_str()).or_default().push(r.clone());
    }
    by_attack
        .into_iter()
        .map(|(attack, spoofs)| {
            let subset: Vec<ScoreRecord> = bona.iter().cloned().chain(spoofs).collect();
            Ok((attack.to_string(), eer(&subset)?.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub min_tdcf_threshold: f64,
    pub per_attack_eer: BTreeMap<String, f64>,
    pub det_points: Vec<DetPoint>,
    pub costs: TdcfCosts,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

/// Full report. Attacks listed in `expected_attacks` that have no scored
/// trials are left out of the breakdown with a warning.
pub fn evaluate(scores: &[ScoreRecord], costs: &TdcfCosts, expected_attacks: &[String]) -> Result<EvalReport> {
    let split = Split::new(scores)?;
    let (c1, c2) = costs.weights()?;
    let curve = split.curve();
    let (eer, eer_threshold) = eer_from_curve(&curve);
    let (min_tdcf, min_tdcf_threshold) = min_tdcf_from_curve(&curve, c1, c2);
    let per_attack_eer = per_attack_eer(scores)?;
    for attack in expected_attacks {
        if !per_attack_eer.contains_key(attack) {
            log::warn!("attack {attack} has no scored trials; omitted from the per-attack table");
        }
    }
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_tdcf,
        min_tdcf_threshold,
        per_attack_eer,
        det_points: curve,
        costs: costs.clone(),
        n_bonafide: split.bona.len(),
        n_spoof: split.spoof.len(),
    })
}

/// Four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (3 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let c = &self.costs;
        let mut out = String::from("metric,value\n");
        for (k, v) in [
            ("eer", self.eer),
            ("eer_threshold", self.eer_threshold),
            ("min_tdcf", self.min_tdcf),
            ("min_tdcf_threshold", self.min_tdcf_threshold),
            ("n_bonafide", self.n_bonafide as f64),
            ("n_spoof", self.n_spoof as f64),
            ("p_tar", c.p_tar),
            ("p_non", c.p_non),
            ("p_spoof", c.p_spoof),
            ("c_miss_asv", c.c_miss_asv),
            ("c_fa_asv", c.c_fa_asv),
            ("c_miss_cm", c.c_miss_cm),
            ("c_fa_cm", c.c_fa_cm),
            ("p_miss_asv", c.p_miss_asv),
            ("p_fa_asv", c.p_fa_asv),
            ("p_miss_spoof_asv", c.p_miss_spoof_asv),
        ] {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn per_attack_csv(&self) -> String {
        let mut out = String::from("attack_id,eer\n");
        for (a, e) in &self.per_attack_eer {
            let _ = writeln!(out, "{a},{e}");
        }
        out
    }

    pub fn det_csv(&self) -> String {
        let mut out = String::from("threshold,fa_rate,miss_rate\n");
        for p in &self.det_points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fa, p.miss);
        }
        out
    }

    /// Human-readable summary laid out like the usual results tables:
    /// one overall row, then one EER row per attack.
    pub fn render_table(&self, system: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>10} {:>11}", "System", "EER (%)", "min t-DCF");
        let _ = writeln!(out, "{}", "-".repeat(39));
        let _ = writeln!(out, "{:<16} {:>10} {:>11}", system, sig4(100.0 * self.eer), sig4(self.min_tdcf));
        if !self.per_attack_eer.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<16} {:>10}", "Attack", "EER (%)");
            let _ = writeln!(out, "{}", "-".repeat(27));
            for (a, e) in &self.per_attack_eer {
                let _ = writeln!(out, "{:<16} {:>10}", a, sig4(100.0 * e));
            }
        }
        let c = &self.costs;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "t-DCF costs: p_tar={} p_non={} p_spoof={} c_miss_asv={} c_fa_asv={} c_miss_cm={} c_fa_cm={} \
             p_miss_asv={} p_fa_asv={} p_miss_spoof_asv={}",
            c.p_tar, c.p_non, c.p_spoof, c.c_miss_asv, c.c_fa_asv, c.c_miss_cm, c.c_fa_cm, c.p_miss_asv,
            c.p_fa_asv, c.p_miss_spoof_asv
        );
        out
    }
}

/// Parse `utt_id score` lines. Blank lines and `#` comments are skipped.
pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Protocol { line: idx + 1, msg };
        if fields.len() != 2 {
            return Err(bad(format!("expected `utt_id score`, found {} fields", fields.len())));
        }
        let score: f64 = fields[1].parse().map_err(|_| bad(format!("bad score `{}`", fields[1])))?;
        if !score.is_finite() {
            return Err(bad(format!("non-finite score for {}", fields[0])));
        }
        out.push((fields[0].to_string(), score));
    }
    Ok(out)
}

pub fn format_scores(scores: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (u, s) in scores {
        let _ = writeln!(out, "{u} {s}");
    }
    out
}

/// Attach protocol labels to raw scores. Every scored utterance must appear
/// in the protocol.
pub fn join_scores(scores: &[(String, f64)], protocol: &[ProtocolEntry]) -> Result<Vec<ScoreRecord>> {
    let by_id: HashMap<&str, &ProtocolEntry> = protocol.iter().map(|e| (e.utt_id.as_str(), e)).collect();
    scores
        .iter()
        .map(|(utt, score)| {
            let e = by_id
                .get(utt.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("scored utterance {utt} is not in the protocol")))?;
            Ok(ScoreRecord { utt_id: utt.clone(), score: *score, key: e.key, attack_id: e.attack_id.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn records(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (i, s) in bona.iter().enumerate() {
            out.push(ScoreRecord { utt_id: format!("B{i}"), score: *s, key: Key::Bonafide, attack_id: "-".into() });
        }
        for (i, s) in spoof.iter().enumerate() {
            out.push(ScoreRecord { utt_id: format!("S{i}"), score: *s, key: Key::Spoof, attack_id: "A01".into() });
        }
        out
    }

    #[test]
    fn perfect_separation_point() {
        let curve = det_curve(&records(&[2.0, 3.0], &[0.0, 1.0])).unwrap();
        let at2 = curve.iter().find(|p| p.threshold == 2.0).unwrap();
        assert_eq!((at2.fa, at2.miss), (0.0, 0.0));
        assert_eq!(eer(&records(&[2.0, 3.0], &[0.0, 1.0])).unwrap().0, 0.0);
    }

    #[test]
    fn all_equal_scores_have_both_endpoints() {
        let curve = det_curve(&records(&[1.0, 1.0], &[1.0])).unwrap();
        assert!(curve.iter().any(|p| (p.fa, p.miss) == (1.0, 0.0)));
        assert!(curve.iter().any(|p| (p.fa, p.miss) == (0.0, 1.0)));
        assert_eq!(eer(&records(&[1.0, 1.0], &[1.0])).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn interleaved_eer_is_half() {
        let (e, t) = eer(&records(&[1.0, 3.0], &[0.0, 2.0])).unwrap();
        assert_eq!(e, 0.5);
        assert_eq!(t, 2.0);
    }

    #[test]
    fn interpolates_between_grid_points() {
        // t=3: (fa, miss) = (2/3, 1/2); t=4: (1/3, 1/2) crosses the diagonal
        let (e, _) = eer(&records(&[2.0, 4.0], &[1.0, 3.0, 5.0])).unwrap();
        let (fa0, m0, fa1, m1) = (2.0 / 3.0, 0.5, 1.0 / 3.0, 0.5);
        let lambda = (fa0 - m0) / ((fa0 - m0) - (fa1 - m1));
        assert!((e - (fa0 + lambda * (fa1 - fa0))).abs() < 1e-15);
    }

    #[test]
    fn single_class_rejected() {
        assert!(det_curve(&records(&[1.0, 2.0], &[])).is_err());
        assert!(eer(&records(&[], &[1.0])).is_err());
    }

    #[test]
    fn tdcf_perfect_and_bounds() {
        let costs = TdcfCosts::default();
        assert_eq!(min_tdcf(&records(&[2.0, 3.0], &[0.0, 1.0]), &costs).unwrap().0, 0.0);
        let (v, _) = min_tdcf(&records(&[0.0, 1.0], &[2.0, 3.0]), &costs).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tdcf_rejects_invalid_operating_point() {
        let costs = TdcfCosts { p_miss_spoof_asv: 1.0, ..TdcfCosts::default() };
        assert!(matches!(min_tdcf(&records(&[1.0], &[0.0]), &costs), Err(Error::Config(_))));
        let costs = TdcfCosts { p_tar: 0.5, ..TdcfCosts::default() };
        assert!(costs.validate().is_err());
    }

    #[test]
    fn per_attack_single_and_separable() {
        let recs = records(&[1.0, 3.0, 5.0], &[0.5, 2.0, 4.5]);
        let map = per_attack_eer(&recs).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map["A01"], eer(&recs).unwrap().0);

        let mut recs = records(&[1.0, 3.0], &[2.0]);
        recs.push(ScoreRecord { utt_id: "X".into(), score: -9.0, key: Key::Spoof, attack_id: "A02".into() });
        assert_eq!(per_attack_eer(&recs).unwrap()["A02"], 0.0);
    }

    #[test]
    fn score_file_round_trip_and_join() {
        let text = "# header\nU1 0.5\nU2 -1.25\n\n";
        let parsed = parse_scores(text).unwrap();
        assert_eq!(parsed, vec![("U1".into(), 0.5), ("U2".into(), -1.25)]);
        assert_eq!(parse_scores(&format_scores(&parsed)).unwrap(), parsed);
        assert!(parse_scores("U1 abc").is_err());
        assert!(parse_scores("U1 1 2").is_err());

        let protocol = crate::protocol::parse_protocol("S U1 - - bonafide\nS U2 - A07 spoof\n").unwrap();
        let joined = join_scores(&parsed, &protocol).unwrap();
        assert_eq!(joined[1].attack_id, "A07");
        assert!(join_scores(&[("U9".into(), 0.0)], &protocol).is_err());
    }

    #[test]
    fn sig4_formatting() {
        assert_eq!(sig4(2.19), "2.190");
        assert_eq!(sig4(0.059), "0.05900");
        assert_eq!(sig4(123456.0), "123456");
        assert_eq!(sig4(0.0), "0");
    }
}
