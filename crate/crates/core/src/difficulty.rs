//! Rule-based prompt difficulty scoring.
//!
//! Eight keyword dimensions (direction, body parts, modifiers, temporal,
//! count, verbs, constraint, spatial) are counted on a lowercased token
//! stream; `S_rule = Σ w_i · count_i`. An externally supplied semantic score
//! `S_llm` is fused for prompts that pass the gate `S_rule >= 4`. No model is
//! ever called: [`emit_prompt_template`] only renders the request text.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::vocab::tokenize_words;

pub const DIMENSIONS: [&str; 8] = ["D1", "D2", "D3", "D4", "D5", "D6", "D7", "D8"];
pub const GATE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionLexicon {
    #[serde(default)]
    pub name: String,
    /// Keywords exactly as listed in the reference table.
    pub keywords: Vec<String>,
    /// Additional keywords beyond the reference table.
    #[serde(default)]
    pub extensions: Vec<String>,
    pub weight: f64,
}

impl DimensionLexicon {
    pub fn patterns(&self) -> impl Iterator<Item = &String> {
        self.keywords.iter().chain(&self.extensions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyLexicon {
    pub dimensions: BTreeMap<String, DimensionLexicon>,
}

fn words(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

impl DifficultyLexicon {
    pub fn default_lexicon() -> Self {
        let table: [(&str, &str, &str); 8] = [
            (
                "direction",
                "left, right, forward, backward, clockwise, counterclockwise, sideways, diagonal, north, south, east, westward",
                "west, northward, southward, eastward, forwards, backwards, anticlockwise, counter clockwise",
            ),
            (
                "body parts",
                "arm, leg, hand, foot, head, torso, hip, shoulder, elbow, knee, wrist, ankle, spine, neck, finger, chest, back",
                "feet, toe, thigh, waist, heel",
            ),
            (
                "modifiers",
                "quickly, slowly, slightly, sharply, gently, rapidly, suddenly, gradually, briefly, continuously, repeatedly",
                "carefully, steadily, smoothly",
            ),
            (
                "temporal",
                "then, while, before, after, simultaneously, followed by, at the same time, next, finally, meanwhile",
                "during, until, afterwards",
            ),
            (
                "count",
                "twice, three times, several times, multiple times, once, again, number of",
                "thrice, four times, five times, a few times",
            ),
            (
                "verbs",
                "kick, punch, bend, twist, spin, crawl, kneel, wave, crouch, squat, hop, leap, lunge, stomp, clap, point, rotate",
                "jog, stretch, swing, throw, stumble, shuffle",
            ),
            ("constraint", "only, specific, particular, certain, exactly, precisely, must, specifically", "exact, precise"),
            (
                "spatial",
                "upward, downward, inward, outward, horizontal, vertical, perpendicular, parallel, above, below, overhead",
                "upwards, downwards, diagonally, across",
            ),
        ];
        let dimensions = DIMENSIONS
            .iter()
            .zip(table)
            .map(|(d, (name, kw, ext))| {
                (d.to_string(), DimensionLexicon { name: name.into(), keywords: words(kw), extensions: words(ext), weight: 1.0 })
            })
            .collect();
        Self { dimensions }
    }

    /// Lexicon with only the reference-table keywords.
    pub fn reference_only() -> Self {
        let mut l = Self::default_lexicon();
        l.dimensions.values_mut().for_each(|d| d.extensions.clear());
        l
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.len() != 8 || DIMENSIONS.iter().any(|d| !self.dimensions.contains_key(*d)) {
            return Err(CoreError::Config("lexicon must define exactly D1..D8".into()));
        }
        for (d, lex) in &self.dimensions {
            if !(lex.weight >= 0.0 && lex.weight.is_finite()) {
                return Err(CoreError::Config(format!("{d}.weight must be finite and >= 0")));
            }
            if let Some(k) = lex.patterns().find(|k| k.to_lowercase() != **k || k.trim().is_empty()) {
                return Err(CoreError::Config(format!("{d} keyword {k:?} must be non-empty lowercase")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dimensions: BTreeMap<String, DimensionLexicon> = serde_json::from_str(text)?;
        let lex = Self { dimensions };
        lex.validate()?;
        Ok(lex)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.dimensions).expect("lexicon serializes")
    }
}

/// Whether `token` is `stem` or a regular inflection of it
/// (`-s`, `-es`, `-ed`, `-ing`, final-e drop, doubled final consonant).
fn inflection_of(token: &str, stem: &str) -> bool {
    if token == stem {
        return true;
    }
    let Some(rest) = token.strip_prefix(stem) else {
        // e-drop: "rotate" -> "rotating", "rotated"
        if let Some(base) = stem.strip_suffix('e') {
            if let Some(rest) = token.strip_prefix(base) {
                return matches!(rest, "ing" | "ed");
            }
        }
        return false;
    };
    if matches!(rest, "s" | "es" | "ed" | "ing") {
        return true;
    }
    // Doubled consonant: "hop" -> "hopping", "spin" -> "spinning".
    if let Some(last) = stem.chars().last() {
        if !"aeiouy".contains(last) {
            let mut chars = rest.chars();
            if chars.next() == Some(last) {
                return matches!(chars.as_str(), "ing" | "ed");
            }
        }
    }
    false
}

/// Occurrences of a keyword pattern in the token stream. Single words match
/// regular inflections; multi-word phrases match exactly.
fn count_pattern(tokens: &[String], pattern: &str) -> usize {
    let parts: Vec<&str> = pattern.split_whitespace().collect();
    match parts.len() {
        0 => 0,
        1 => tokens.iter().filter(|t| inflection_of(t, parts[0])).count(),
        n => tokens.windows(n).filter(|w| w.iter().zip(&parts).all(|(a, b)| a == b)).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleScore {
    pub counts: BTreeMap<String, usize>,
    pub s_rule: f64,
}

pub fn score_rule(caption: &str, lexicon: &DifficultyLexicon) -> RuleScore {
    let tokens = tokenize_words(caption);
    let mut counts = BTreeMap::new();
    let mut s_rule = 0.0;
    for (d, lex) in &lexicon.dimensions {
        let c: usize = lex.patterns().map(|p| count_pattern(&tokens, p)).sum();
        s_rule += lex.weight * c as f64;
        counts.insert(d.clone(), c);
    }
    RuleScore { counts, s_rule }
}

pub fn llm_gate(s_rule: f64) -> bool {
    s_rule >= GATE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub motion_id: String,
    pub caption: String,
    pub counts: BTreeMap<String, usize>,
    pub s_rule: f64,
    /// Only kept for prompts that passed the gate.
    pub s_llm: Option<f64>,
    pub s_final: f64,
}

impl ScoredPrompt {
    pub fn new(motion_id: impl Into<String>, caption: &str, lexicon: &DifficultyLexicon, llm: Option<f64>, alpha: f64) -> Self {
        let r = score_rule(caption, lexicon);
        let s_llm = llm.filter(|_| llm_gate(r.s_rule));
        let mut p = Self {
            motion_id: motion_id.into(),
            caption: caption.to_string(),
            counts: r.counts,
            s_rule: r.s_rule,
            s_llm,
            s_final: r.s_rule,
        };
        p.apply_alpha(alpha);
        p
    }

    fn apply_alpha(&mut self, alpha: f64) {
        self.s_final = self.s_rule + self.s_llm.map_or(0.0, |s| alpha * s);
    }
}

/// Sorts by `S_final` (descending, ties by caption), keeps the first prompt
/// per motion id, and takes `k`.
pub fn fuse_and_select(prompts: &[ScoredPrompt], alpha: f64, k: usize) -> Vec<ScoredPrompt> {
    let mut all: Vec<ScoredPrompt> = prompts.to_vec();
    all.iter_mut().for_each(|p| p.apply_alpha(alpha));
    all.sort_by(|a, b| b.s_final.total_cmp(&a.s_final).then_with(|| a.caption.cmp(&b.caption)));
    let mut seen = HashSet::new();
    let unique: Vec<ScoredPrompt> = all.into_iter().filter(|p| seen.insert(p.motion_id.clone())).collect();
    if k > unique.len() {
        log::warn!("top-k {k} exceeds the pool of {} unique motions; returning the full pool", unique.len());
    }
    unique.into_iter().take(k).collect()
}

const SYSTEM_PROMPT: &str = "You are a motion-language difficulty assessor. Rate how hard the given motion caption is \
for a text-to-motion model on an integer scale from 1 (trivial) to 10 (very hard). Consider directional precision, \
body-part specificity, temporal composition of multiple actions, counts and repetitions, speed modifiers, explicit \
constraints, and spatial relations. Captions that contain difficulty keywords but describe a simple action should \
score low. Respond with JSON only: {\"score\": <integer 1-10>, \"justification\": \"<one sentence>\"}.";

/// Renders the scoring request for one caption as a JSON envelope.
pub fn emit_prompt_template(caption: &str) -> String {
    let envelope = serde_json::json!({
        "response_format": {"type": "json_object"},
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": format!("Caption: {caption}\nReturn the JSON object now.")},
        ],
    });
    serde_json::to_string_pretty(&envelope).expect("envelope serializes")
}
