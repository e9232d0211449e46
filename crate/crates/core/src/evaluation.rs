//! Win ratio, degeneracy flagging, forced-choice MCQ tallies and best-config
//! selection over JSON-lines records.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default length ratio above which steered outputs count as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 2.0;

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// One prompt scored with and without steering. Scores may still be `null`
/// when lengths have been filled in but the classifier has not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredPair {
    pub prompt_id: String,
    pub base_score: Option<f64>,
    pub steered_score: Option<f64>,
    pub base_len: u64,
    pub steered_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McqCategory {
    Both,
    Concept1Only,
    Concept2Only,
    Positive,
    Negative,
    Neutral,
}

impl McqCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            McqCategory::Both => "both",
            McqCategory::Concept1Only => "concept1_only",
            McqCategory::Concept2Only => "concept2_only",
            McqCategory::Positive => "positive",
            McqCategory::Negative => "negative",
            McqCategory::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqRecord {
    pub question_id: String,
    /// Logits of the letters A, B, C, D.
    pub letter_logits: [f64; 4],
    pub category_of_letter: BTreeMap<String, McqCategory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum McqMode {
    /// Categories both, concept1_only, concept2_only, neutral.
    Compositional,
    /// Categories positive, negative and two neutral slots.
    SingleConcept,
}

impl McqMode {
    pub fn categories(self) -> &'static [McqCategory] {
        match self {
            McqMode::Compositional => &[
                McqCategory::Both,
                McqCategory::Concept1Only,
                McqCategory::Concept2Only,
                McqCategory::Neutral,
            ],
            McqMode::SingleConcept => &[McqCategory::Positive, McqCategory::Negative, McqCategory::Neutral],
        }
    }
}

impl McqRecord {
    /// Categories in letter order, after checking the letter map.
    pub fn categories(&self) -> Result<[McqCategory; 4]> {
        if self.category_of_letter.len() != 4 {
            return Err(self.invalid("category_of_letter must map exactly A, B, C and D"));
        }
        let mut out = [McqCategory::Neutral; 4];
        for (slot, letter) in out.iter_mut().zip(LETTERS) {
            *slot = *self
                .category_of_letter
                .get(letter)
                .ok_or_else(|| self.invalid(&format!("letter {letter} has no category")))?;
        }
        Ok(out)
    }

    pub fn mode(&self) -> Result<McqMode> {
        let mut sorted = self.categories()?;
        sorted.sort();
        use McqCategory::*;
        match sorted {
            [Both, Concept1Only, Concept2Only, Neutral] => Ok(McqMode::Compositional),
            [Positive, Negative, Neutral, Neutral] => Ok(McqMode::SingleConcept),
            _ => Err(self.invalid(
                "categories must be {both, concept1_only, concept2_only, neutral} \
                 or {positive, negative, neutral, neutral}",
            )),
        }
    }

    /// Softmax over the four letter logits.
    pub fn probabilities(&self) -> Result<[f64; 4]> {
        if self.letter_logits.iter().any(|l| !l.is_finite()) {
            return Err(self.invalid("letter logits must be finite"));
        }
        let max = self.letter_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = self.letter_logits.map(|l| (l - max).exp());
        let total: f64 = exps.iter().sum();
        Ok(exps.map(|e| e / total))
    }

    /// Index of the largest logit; the earliest letter wins ties.
    pub fn choice(&self) -> usize {
        let mut best = 0;
        for i in 1..4 {
            if self.letter_logits[i] > self.letter_logits[best] {
                best = i;
            }
        }
        best
    }

    fn invalid(&self, msg: &str) -> Error {
        Error::InvalidArgument(format!("MCQ record `{}`: {msg}", self.question_id))
    }
}

/// Fraction of pairs whose steered score is strictly higher.
pub fn win_ratio(pairs: &[ScoredPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySelection("win ratio of no pairs".into()));
    }
    let mut wins = 0usize;
    for p in pairs {
        match (p.base_score, p.steered_score) {
            (Some(b), Some(s)) if b.is_finite() && s.is_finite() => wins += usize::from(s > b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "pair `{}` is missing a finite score",
                    p.prompt_id
                )))
            }
        }
    }
    Ok(wins as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Degeneracy {
    pub ratio: f64,
    pub degenerate: bool,
}

/// `mean(steered_len) / mean(base_len)`, degenerate when strictly above
/// `threshold`.
pub fn degeneracy_flag(pairs: &[ScoredPair], threshold: f64) -> Result<Degeneracy> {
    if pairs.is_empty() {
        return Err(Error::EmptySelection("degeneracy of no pairs".into()));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    let base: f64 = pairs.iter().map(|p| p.base_len as f64).sum();
    let steered: f64 = pairs.iter().map(|p| p.steered_len as f64).sum();
    if base == 0.0 {
        return Err(Error::Degenerate("mean base length is zero".into()));
    }
    // Equal counts cancel in the ratio of means.
    let ratio = steered / base;
    Ok(Degeneracy {
        ratio,
        degenerate: ratio > threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTally {
    pub category: McqCategory,
    pub mean_probability: f64,
    pub choice_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McqTally {
    pub mode: McqMode,
    pub questions: usize,
    pub categories: Vec<CategoryTally>,
}

impl McqTally {
    pub fn get(&self, category: McqCategory) -> Option<&CategoryTally> {
        self.categories.iter().find(|c| c.category == category)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,mean_probability,choice_rate\n");
        for c in &self.categories {
            out.push_str(&format!("{},{},{}\n", c.category.as_str(), c.mean_probability, c.choice_rate));
        }
        out
    }
}

/// Per-category mean probability and final-choice rate. A category's
/// probability is the summed probability of its letters.
pub fn mcq_tally(records: &[McqRecord]) -> Result<McqTally> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptySelection("MCQ tally of no records".into()))?;
    let mode = first.mode()?;
    let cats = mode.categories();
    let mut prob_sum = vec![0.0; cats.len()];
    let mut chosen = vec![0usize; cats.len()];
    for r in records {
        if r.mode()? != mode {
            return Err(r.invalid("compositional and single-concept records cannot be mixed"));
        }
        let letters = r.categories()?;
        let probs = r.probabilities()?;
        for (cat, p) in letters.iter().zip(probs) {
            let slot = cats.iter().position(|c| c == cat).expect("mode fixes the category set");
            prob_sum[slot] += p;
        }
        let pick = letters[r.choice()];
        chosen[cats.iter().position(|&c| c == pick).expect("mode fixes the category set")] += 1;
    }
    let n = records.len() as f64;
    Ok(McqTally {
        mode,
        questions: records.len(),
        categories: cats
            .iter()
            .enumerate()
            .map(|(i, &category)| CategoryTally {
                category,
                mean_probability: prob_sum[i] / n,
                choice_rate: chosen[i] as f64 / n,
            })
            .collect(),
    })
}

/// One hyperparameter configuration's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigRow {
    pub config: String,
    pub win_ratio: f64,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    WinRatio,
    MeanProbability,
    ChoiceRate,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "win_ratio" => Ok(Objective::WinRatio),
            "mean_probability" => Ok(Objective::MeanProbability),
            "choice_rate" => Ok(Objective::ChoiceRate),
            other => Err(Error::InvalidArgument(format!("unknown objective `{other}`"))),
        }
    }
}

impl Objective {
    fn value(self, row: &ConfigRow) -> Result<f64> {
        let v = match self {
            Objective::WinRatio => Some(row.win_ratio),
            Objective::MeanProbability => row.mean_probability,
            Objective::ChoiceRate => row.choice_rate,
        };
        match v {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(Error::InvalidArgument(format!(
                "config `{}` has no finite value for the objective",
                row.config
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub row: ConfigRow,
    /// Set when every row was degenerate and the best degenerate one was taken.
    pub warning: Option<String>,
}

/// Best non-degenerate row by `objective`; ties go to the lexicographically
/// first config key. Falls back to degenerate rows with a warning.
pub fn best_config_select(table: &[ConfigRow], objective: Objective) -> Result<Selection> {
    if table.is_empty() {
        return Err(Error::EmptySelection("config table is empty".into()));
    }
    let healthy: Vec<&ConfigRow> = table.iter().filter(|r| !r.degenerate).collect();
    let (pool, warning) = if healthy.is_empty() {
        (
            table.iter().collect::<Vec<_>>(),
            Some("every configuration is degenerate; best degenerate one selected".to_owned()),
        )
    } else {
        (healthy, None)
    };
    let mut best: Option<(&ConfigRow, f64)> = None;
    for row in pool {
        let v = objective.value(row)?;
        best = match best {
            Some((b, bv)) if bv > v || (bv == v && b.config <= row.config) => Some((b, bv)),
            _ => Some((row, v)),
        };
    }
    let (row, _) = best.expect("pool is nonempty");
    Ok(Selection {
        row: row.clone(),
        warning,
    })
}

/// One record per nonblank line.
pub fn parse_jsonl<T: DeserializeOwned>(what: &'static str, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::format(what, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pair(base: f64, steered: f64) -> ScoredPair {
        ScoredPair {
            prompt_id: "p".into(),
            base_score: Some(base),
            steered_score: Some(steered),
            base_len: 10,
            steered_len: 10,
        }
    }

    fn lens(base: u64, steered: u64) -> ScoredPair {
        ScoredPair {
            base_len: base,
            steered_len: steered,
            ..pair(0.0, 0.0)
        }
    }

    fn mcq(logits: [f64; 4], cats: [McqCategory; 4]) -> McqRecord {
        McqRecord {
            question_id: "q".into(),
            letter_logits: logits,
            category_of_letter: LETTERS.iter().map(|l| l.to_string()).zip(cats).collect(),
        }
    }

    use McqCategory::*;
    const COMP: [McqCategory; 4] = [Concept2Only, Both, Neutral, Concept1Only];

    #[test]
    fn win_ratio_examples() {
        assert_eq!(win_ratio(&[pair(0.0, 1.0), pair(0.2, 0.3)]).unwrap(), 1.0);
        assert_eq!(win_ratio(&[pair(0.5, 0.5), pair(1.0, 1.0)]).unwrap(), 0.0);
        let five = [pair(0.0, 1.0), pair(0.1, 0.2), pair(0.3, 0.9), pair(0.5, 0.5), pair(0.9, 0.1)];
        assert_eq!(win_ratio(&five).unwrap(), 0.6);
        assert!(win_ratio(&[]).is_err());
        let mut unscored = pair(0.0, 1.0);
        unscored.steered_score = None;
        assert!(win_ratio(&[unscored]).is_err());
    }

    #[test]
    fn degeneracy_examples() {
        let d = degeneracy_flag(&[lens(7, 7), lens(3, 3)], 2.0).unwrap();
        assert_eq!(d, Degeneracy { ratio: 1.0, degenerate: false });
        let d = degeneracy_flag(&[lens(10, 20), lens(5, 10)], 2.0).unwrap();
        assert_eq!(d, Degeneracy { ratio: 2.0, degenerate: false });
        let d = degeneracy_flag(&[lens(10, 30), lens(10, 15)], 2.0).unwrap();
        assert_eq!(d, Degeneracy { ratio: 2.25, degenerate: true });
        assert!(degeneracy_flag(&[lens(0, 3)], 2.0).is_err());
    }

    #[test]
    fn mcq_uniform_and_peaked() {
        let t = mcq_tally(&[mcq([0.0; 4], COMP)]).unwrap();
        assert_eq!(t.mode, McqMode::Compositional);
        for c in &t.categories {
            assert_abs_diff_eq!(c.mean_probability, 0.25, epsilon = 1e-15);
        }
        // A is concept2_only and wins the tie
        assert_eq!(t.get(Concept2Only).unwrap().choice_rate, 1.0);

        let t = mcq_tally(&[mcq([10.0, 0.0, 0.0, 0.0], COMP)]).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 3.0);
        assert_abs_diff_eq!(t.get(Concept2Only).unwrap().mean_probability, expected, epsilon = 1e-12);
        assert!(expected > 0.9998);
        let sum: f64 = t.categories.iter().map(|c| c.mean_probability).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mcq_single_concept_merges_neutral_slots() {
        let r = mcq([1.0, 1.0, 0.0, 3.0], [Neutral, Positive, Neutral, Negative]);
        let t = mcq_tally(&[r]).unwrap();
        assert_eq!(t.mode, McqMode::SingleConcept);
        assert_eq!(t.categories.len(), 3);
        let z = 2.0 * 1f64.exp() + 1.0 + 3f64.exp();
        assert_abs_diff_eq!(t.get(Neutral).unwrap().mean_probability, (1f64.exp() + 1.0) / z, epsilon = 1e-12);
        assert_eq!(t.get(Negative).unwrap().choice_rate, 1.0);
    }

    #[test]
    fn mcq_rejects_bad_maps() {
        assert!(mcq_tally(&[mcq([0.0; 4], [Both, Both, Neutral, Concept1Only])]).is_err());
        assert!(mcq_tally(&[]).is_err());
        let mixed = [mcq([0.0; 4], COMP), mcq([0.0; 4], [Neutral, Positive, Neutral, Negative])];
        assert!(mcq_tally(&mixed).is_err());
        let mut r = mcq([0.0; 4], COMP);
        r.letter_logits[2] = f64::NAN;
        assert!(mcq_tally(&[r]).is_err());
    }

    fn row(config: &str, win: f64, degenerate: bool) -> ConfigRow {
        ConfigRow {
            config: config.into(),
            win_ratio: win,
            degenerate,
            mean_probability: None,
            choice_rate: None,
        }
    }

    #[test]
    fn best_config_rules() {
        let one = best_config_select(&[row("a", 0.1, true)], Objective::WinRatio).unwrap();
        assert_eq!(one.row.config, "a");
        assert!(one.warning.is_some());
        let s = best_config_select(&[row("a", 0.5, true), row("b", 0.5, false)], Objective::WinRatio).unwrap();
        assert_eq!(s.row.config, "b");
        assert!(s.warning.is_none());
        let s = best_config_select(
            &[row("z", 0.7, false), row("m", 0.7, false), row("q", 0.9, true)],
            Objective::WinRatio,
        )
        .unwrap();
        assert_eq!(s.row.config, "m");
        assert!(best_config_select(&[], Objective::WinRatio).is_err());
        assert!(best_config_select(&[row("a", 0.5, false)], Objective::ChoiceRate).is_err());
    }

    #[test]
    fn jsonl_parsing() {
        let text = "{\"prompt_id\":\"a\",\"base_score\":0.1,\"steered_score\":0.4,\"base_len\":12,\"steered_len\":20}\n\n\
                    {\"prompt_id\":\"b\",\"base_score\":null,\"steered_score\":null,\"base_len\":3,\"steered_len\":4}\n";
        let pairs: Vec<ScoredPair> = parse_jsonl("scored pairs", text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].base_score, None);
        let bad = "{\"prompt_id\":\"a\",\"base_len\":-1}";
        assert!(parse_jsonl::<ScoredPair>("scored pairs", bad).is_err());
        let m = "{\"question_id\":\"q1\",\"letter_logits\":[1,2,3,4],\"category_of_letter\":{\"A\":\"both\",\"B\":\"neutral\",\"C\":\"concept1_only\",\"D\":\"concept2_only\"}}";
        let recs: Vec<McqRecord> = parse_jsonl("MCQ records", m).unwrap();
        assert_eq!(recs[0].mode().unwrap(), McqMode::Compositional);
    }
}
