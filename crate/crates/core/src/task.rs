//! Synthetic audio-key recall environment.
//!
//! Each instance hides K key symbols in an audio feature matrix: key frames
//! carry an orthogonal symbol direction plus Gaussian noise, non-key frames
//! are pure noise. The prompt names the queried frame indices with digit
//! tokens; a correct completion must read the symbols out of the audio. The
//! expected completion interleaves fixed scaffold tokens (predictable from
//! text alone) with key mentions inside a think region, then repeats the
//! keys as the answer — so scaffold tokens are prior-predictable while key
//! tokens are genuinely modality-dependent, and the answer can be produced
//! either by re-reading the audio or by copying the model's own think text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use crate::model::TokenId;
use crate::util::Mat;
use crate::{Error, Result};

// ── Tags and vocabulary layout ──────────────────────────────────────────

/// Coarse part-of-speech tag attached to every vocabulary token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Noun,
    Verb,
    Adj,
    Adv,
    Num,
    X,
    Det,
    Adp,
    Conj,
    Punct,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Adj => "ADJ",
            Tag::Adv => "ADV",
            Tag::Num => "NUM",
            Tag::X => "X",
            Tag::Det => "DET",
            Tag::Adp => "ADP",
            Tag::Conj => "CONJ",
            Tag::Punct => "PUNCT",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NOUN" => Ok(Tag::Noun),
            "VERB" => Ok(Tag::Verb),
            "ADJ" => Ok(Tag::Adj),
            "ADV" => Ok(Tag::Adv),
            "NUM" => Ok(Tag::Num),
            "X" => Ok(Tag::X),
            "DET" => Ok(Tag::Det),
            "ADP" => Ok(Tag::Adp),
            "CONJ" => Ok(Tag::Conj),
            "PUNCT" => Ok(Tag::Punct),
            other => Err(Error::Config(format!("unknown tag {other:?}"))),
        }
    }
}

/// Token id → tag. Incomplete maps are allowed; the POS gate falls back to
/// an all-ones mask when it meets an unmapped token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagMap(pub HashMap<TokenId, Tag>);

impl TagMap {
    pub fn get(&self, tok: TokenId) -> Option<Tag> {
        self.0.get(&tok).copied()
    }
}

/// Load a user-supplied tag map: a JSON object of token id → tag string.
pub fn load_tag_map(path: &Path) -> Result<TagMap> {
    let raw: HashMap<String, String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut map = HashMap::with_capacity(raw.len());
    for (k, v) in raw {
        let tok: TokenId = k
            .parse()
            .map_err(|_| Error::Config(format!("tag map key {k:?} is not a token id")))?;
        map.insert(tok, v.parse::<Tag>()?);
    }
    Ok(TagMap(map))
}

/// Fixed partition of the vocabulary: reserved markers, scaffold function
/// tokens, digit tokens naming audio frame indices, the NOUN key alphabet,
/// and two X-tagged spares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub pad: TokenId,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub eos: TokenId,
    pub scaffold: Range<TokenId>,
    pub digits: Range<TokenId>,
    pub keys: Range<TokenId>,
    pub spare_x: Range<TokenId>,
}

impl VocabLayout {
    pub const MIN_VOCAB: usize = 21;

    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        if vocab_size < Self::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} below layout minimum {}",
                Self::MIN_VOCAB
            )));
        }
        Ok(VocabLayout {
            vocab_size,
            pad: 0,
            think_open: 1,
            think_close: 2,
            eos: 3,
            scaffold: 4..10,
            digits: 10..18,
            keys: 18..vocab_size - 2,
            spare_x: vocab_size - 2..vocab_size,
        })
    }

    pub fn tag_of(&self, tok: TokenId) -> Tag {
        if tok == self.pad || tok == self.think_open || tok == self.think_close || tok == self.eos
        {
            Tag::Punct
        } else if self.scaffold.contains(&tok) {
            // Alternate function classes across the scaffold band.
            match (tok - self.scaffold.start) % 3 {
                0 => Tag::Det,
                1 => Tag::Adp,
                _ => Tag::Conj,
            }
        } else if self.digits.contains(&tok) {
            Tag::Num
        } else if self.keys.contains(&tok) {
            Tag::Noun
        } else {
            Tag::X
        }
    }

    pub fn tag_map(&self) -> TagMap {
        TagMap(
            (0..self.vocab_size)
                .map(|tok| (tok, self.tag_of(tok)))
                .collect(),
        )
    }
}

// ── Instances ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Audio frames A.
    pub frames: usize,
    /// Hidden keys K.
    pub keys: usize,
    pub noise_sigma: f64,
    pub alphabet_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            frames: 6,
            keys: 2,
            noise_sigma: 0.1,
            alphabet_size: 8,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, layout: &VocabLayout, d_audio: usize) -> Result<()> {
        if self.keys == 0 || self.keys > self.frames {
            return Err(Error::Config(format!(
                "keys {} must be in 1..=frames {}",
                self.keys, self.frames
            )));
        }
        if self.alphabet_size == 0 || self.alphabet_size > layout.keys.len() {
            return Err(Error::Config(format!(
                "alphabet size {} exceeds reserved NOUN range {}",
                self.alphabet_size,
                layout.keys.len()
            )));
        }
        if self.alphabet_size > d_audio {
            return Err(Error::Config(format!(
                "alphabet size {} exceeds d_audio {} (symbol directions must be orthogonal)",
                self.alphabet_size, d_audio
            )));
        }
        if self.frames > layout.digits.len() {
            return Err(Error::Config(format!(
                "frames {} exceed digit token range {}",
                self.frames,
                layout.digits.len()
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One task instance. Exportable as JSON for golden tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub audio: Mat,
    /// Distinct key frame indices, ascending.
    pub key_positions: Vec<usize>,
    /// Key alphabet token ids, aligned with `key_positions`.
    pub key_symbols: Vec<TokenId>,
    pub prompt: Vec<TokenId>,
    pub gold_answer: Vec<TokenId>,
    pub gold_completion: Vec<TokenId>,
    pub tag_map: TagMap,
}

impl TaskInstance {
    pub fn export_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn import_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The deterministic target completion:
/// `<think> s k1 s k2 ... </think> k1 k2 ... <eos>` where the scaffold
/// tokens cycle through a fixed sub-band.
fn gold_completion(layout: &VocabLayout, key_symbols: &[TokenId]) -> Vec<TokenId> {
    let mut out = vec![layout.think_open];
    for (i, &sym) in key_symbols.iter().enumerate() {
        out.push(layout.scaffold.start + 3 + (i % 3));
        out.push(sym);
    }
    out.push(layout.think_close);
    out.extend_from_slice(key_symbols);
    out.push(layout.eos);
    out
}

/// Deterministically generate one instance. Key frames receive the one-hot
/// symbol direction plus N(0, sigma^2) noise; other frames are pure noise.
pub fn generate_instance(
    seed: u64,
    spec: &TaskSpec,
    layout: &VocabLayout,
    d_audio: usize,
) -> Result<TaskInstance> {
    spec.validate(layout, d_audio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut positions: Vec<usize> = (0..spec.frames).collect();
    positions.shuffle(&mut rng);
    let mut key_positions: Vec<usize> = positions[..spec.keys].to_vec();
    key_positions.sort_unstable();

    let key_symbols: Vec<TokenId> = (0..spec.keys)
        .map(|_| layout.keys.start + rng.gen_range(0..spec.alphabet_size))
        .collect();

    let mut audio = Mat::zeros(spec.frames, d_audio);
    for v in audio.data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z * spec.noise_sigma;
    }
    for (pos, sym) in key_positions.iter().zip(&key_symbols) {
        let dir = sym - layout.keys.start;
        *audio.at_mut(*pos, dir) += 1.0;
    }

    // Fixed instruction tokens, then one digit slot per queried frame.
    let mut prompt = vec![
        layout.scaffold.start,
        layout.scaffold.start + 1,
        layout.scaffold.start + 2,
    ];
    for &pos in &key_positions {
        prompt.push(layout.digits.start + pos);
    }

    Ok(TaskInstance {
        audio,
        gold_completion: gold_completion(layout, &key_symbols),
        gold_answer: key_symbols.clone(),
        key_positions,
        key_symbols,
        prompt,
        tag_map: layout.tag_map(),
    })
}

// ── Rewards ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyMode {
    Strict,
    Fractional,
}

/// Split a completion at the first think-close marker. Returns
/// (think region, answer segment) where the answer excludes the trailing
/// end marker. `None` when no think-close marker exists.
pub fn split_completion<'a>(
    tokens: &'a [TokenId],
    layout: &VocabLayout,
) -> Option<(&'a [TokenId], &'a [TokenId])> {
    let close = tokens.iter().position(|&t| t == layout.think_close)?;
    let rest = &tokens[close + 1..];
    let end = rest
        .iter()
        .position(|&t| t == layout.eos)
        .unwrap_or(rest.len());
    Some((&tokens[..close], &rest[..end]))
}

/// Ground-truth accuracy of the answer segment. Missing think-close yields
/// 0; `Fractional` credits matched positions against the gold length.
pub fn score_accuracy(
    tokens: &[TokenId],
    instance: &TaskInstance,
    layout: &VocabLayout,
    mode: AccuracyMode,
) -> f64 {
    let Some((_, answer)) = split_completion(tokens, layout) else {
        return 0.0;
    };
    match mode {
        AccuracyMode::Strict => {
            if answer == instance.gold_answer.as_slice() {
                1.0
            } else {
                0.0
            }
        }
        AccuracyMode::Fractional => {
            let matches = answer
                .iter()
                .zip(&instance.gold_answer)
                .filter(|(a, b)| a == b)
                .count();
            matches as f64 / instance.gold_answer.len() as f64
        }
    }
}

/// Template adherence: exactly one think-open at position 0, exactly one
/// think-close after it, a nonempty answer, and a single terminating end
/// marker. Content inside the think region is irrelevant.
pub fn score_format(tokens: &[TokenId], layout: &VocabLayout) -> f64 {
    let opens = tokens.iter().filter(|&&t| t == layout.think_open).count();
    let closes = tokens.iter().filter(|&&t| t == layout.think_close).count();
    let ends = tokens.iter().filter(|&&t| t == layout.eos).count();
    if opens != 1 || closes != 1 || ends != 1 {
        return 0.0;
    }
    if tokens.first() != Some(&layout.think_open) || tokens.last() != Some(&layout.eos) {
        return 0.0;
    }
    match split_completion(tokens, layout) {
        Some((think, answer)) if !think.is_empty() && !answer.is_empty() => 1.0,
        _ => 0.0,
    }
}

/// Pluggable reasoning-consistency checker.
pub trait ConsistencyChecker {
    fn score(&self, think: &[TokenId], answer: &[TokenId], format_ok: bool) -> Result<f64>;
}

/// Rule-based stand-in for an external evaluator: consistent iff the format
/// is valid and every answer token also occurs inside the think region.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedChecker;

impl ConsistencyChecker for RuleBasedChecker {
    fn score(&self, think: &[TokenId], answer: &[TokenId], format_ok: bool) -> Result<f64> {
        if !format_ok {
            return Ok(0.0);
        }
        let ok = answer.iter().all(|tok| think.contains(tok));
        Ok(if ok { 1.0 } else { 0.0 })
    }
}

pub fn score_consistency(
    tokens: &[TokenId],
    layout: &VocabLayout,
    checker: &dyn ConsistencyChecker,
) -> Result<f64> {
    let format_ok = score_format(tokens, layout) == 1.0;
    match split_completion(tokens, layout) {
        Some((think, answer)) => checker.score(think, answer, format_ok),
        None => checker.score(&[], &[], false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lambda_acc: f64,
    pub lambda_format: f64,
    pub lambda_cons: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lambda_acc: 2.0,
            lambda_format: 1.0,
            lambda_cons: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_acc < 0.0 || self.lambda_format < 0.0 || self.lambda_cons < 0.0 {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn max_total(&self) -> f64 {
        self.lambda_acc + self.lambda_format + self.lambda_cons
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub format: f64,
    pub cons: f64,
    pub total: f64,
}

pub fn combined_reward(
    acc: f64,
    format: f64,
    cons: f64,
    weights: &RewardWeights,
) -> RewardBreakdown {
    RewardBreakdown {
        acc,
        format,
        cons,
        total: weights.lambda_acc * acc
            + weights.lambda_format * format
            + weights.lambda_cons * cons,
    }
}

/// Full reward for one completion.
pub fn score_completion(
    tokens: &[TokenId],
    instance: &TaskInstance,
    layout: &VocabLayout,
    weights: &RewardWeights,
    mode: AccuracyMode,
    checker: &dyn ConsistencyChecker,
) -> Result<RewardBreakdown> {
    let acc = score_accuracy(tokens, instance, layout, mode);
    let format = score_format(tokens, layout);
    let cons = score_consistency(tokens, layout, checker)?;
    Ok(combined_reward(acc, format, cons, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::for_vocab(32).unwrap()
    }

    #[test]
    fn layout_partitions_the_vocabulary() {
        let l = layout();
        assert_eq!(l.keys, 18..30);
        assert_eq!(l.spare_x, 30..32);
        assert_eq!(l.tag_of(0), Tag::Punct);
        assert_eq!(l.tag_of(4), Tag::Det);
        assert_eq!(l.tag_of(5), Tag::Adp);
        assert_eq!(l.tag_of(6), Tag::Conj);
        assert_eq!(l.tag_of(10), Tag::Num);
        assert_eq!(l.tag_of(18), Tag::Noun);
        assert_eq!(l.tag_of(31), Tag::X);
    }

    #[test]
    fn instance_is_deterministic_and_well_formed() {
        let l = layout();
        let spec = TaskSpec {
            frames: 8,
            keys: 3,
            noise_sigma: 0.1,
            alphabet_size: 8,
        };
        let a = generate_instance(5, &spec, &l, 8).unwrap();
        let b = generate_instance(5, &spec, &l, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.key_positions.len(), 3);
        let mut sorted = a.key_positions.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 3, "key positions must be distinct");
        assert!(a.key_positions.iter().all(|&p| p < 8));
        assert_eq!(a.gold_answer, a.key_symbols);
    }

    #[test]
    fn zero_noise_key_frame_equals_symbol_direction() {
        let l = layout();
        let spec = TaskSpec {
            frames: 4,
            keys: 1,
            noise_sigma: 0.0,
            alphabet_size: 8,
        };
        let inst = generate_instance(7, &spec, &l, 8).unwrap();
        let pos = inst.key_positions[0];
        let dir = inst.key_symbols[0] - l.keys.start;
        for c in 0..8 {
            let expect = if c == dir { 1.0 } else { 0.0 };
            assert_eq!(inst.audio.at(pos, c), expect);
        }
        // Non-key frames are exactly zero at sigma = 0.
        for r in 0..4 {
            if r != pos {
                assert!(inst.audio.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn oracle_reader_solves_every_instance_at_zero_noise() {
        let l = layout();
        let spec = TaskSpec {
            noise_sigma: 0.0,
            ..TaskSpec::default()
        };
        for seed in 0..32 {
            let inst = generate_instance(seed, &spec, &l, 8).unwrap();
            // Oracle: argmax component of each queried frame.
            let answer: Vec<TokenId> = inst
                .key_positions
                .iter()
                .map(|&p| {
                    let row = inst.audio.row(p);
                    let mut best = 0;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    l.keys.start + best
                })
                .collect();
            let mut completion = vec![l.think_open];
            completion.extend_from_slice(&answer);
            completion.push(l.think_close);
            completion.extend_from_slice(&answer);
            completion.push(l.eos);
            assert_eq!(
                score_accuracy(&completion, &inst, &l, AccuracyMode::Strict),
                1.0
            );
        }
    }

    #[test]
    fn gold_completion_scores_perfectly() {
        let l = layout();
        let inst = generate_instance(3, &TaskSpec::default(), &l, 8).unwrap();
        let r = score_completion(
            &inst.gold_completion,
            &inst,
            &l,
            &RewardWeights::default(),
            AccuracyMode::Strict,
            &RuleBasedChecker,
        )
        .unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.format, 1.0);
        assert_eq!(r.cons, 1.0);
        assert_eq!(r.total, 4.0);
    }

    #[test]
    fn accuracy_modes() {
        let l = layout();
        let spec = TaskSpec {
            frames: 6,
            keys: 3,
            noise_sigma: 0.1,
            alphabet_size: 6,
        };
        let inst = generate_instance(11, &spec, &l, 8).unwrap();
        // Two of three answer tokens correct.
        let mut answer = inst.gold_answer.clone();
        answer[2] = if answer[2] == l.keys.start {
            l.keys.start + 1
        } else {
            l.keys.start
        };
        let mut completion = vec![l.think_open, l.scaffold.start, l.think_close];
        completion.extend_from_slice(&answer);
        completion.push(l.eos);
        assert_eq!(
            score_accuracy(&completion, &inst, &l, AccuracyMode::Strict),
            0.0
        );
        let frac = score_accuracy(&completion, &inst, &l, AccuracyMode::Fractional);
        assert!((frac - 2.0 / 3.0).abs() < 1e-15);
        // No think-close marker: unparseable, accuracy 0.
        assert_eq!(
            score_accuracy(&[l.think_open, l.eos], &inst, &l, AccuracyMode::Strict),
            0.0
        );
    }

    #[test]
    fn format_rules() {
        let l = layout();
        let k = l.keys.start;
        let good = vec![l.think_open, l.scaffold.start, k, l.think_close, k, l.eos];
        assert_eq!(score_format(&good, &l), 1.0);
        // Truncated: no end marker.
        let truncated = vec![l.think_open, k, l.think_close, k];
        assert_eq!(score_format(&truncated, &l), 0.0);
        // Two think-open markers.
        let doubled = vec![l.think_open, l.think_open, k, l.think_close, k, l.eos];
        assert_eq!(score_format(&doubled, &l), 0.0);
        // Empty answer segment.
        let empty = vec![l.think_open, k, l.think_close, l.eos];
        assert_eq!(score_format(&empty, &l), 0.0);
        // Format ignores think-region content.
        let other = vec![l.think_open, k + 1, k + 2, l.think_close, k, l.eos];
        assert_eq!(score_format(&other, &l), 1.0);
    }

    #[test]
    fn consistency_rules() {
        let l = layout();
        let k = l.keys.start;
        let consistent = vec![l.think_open, l.scaffold.start, k, l.think_close, k, l.eos];
        assert_eq!(
            score_consistency(&consistent, &l, &RuleBasedChecker).unwrap(),
            1.0
        );
        // Valid format but the answer token never appears in the think region.
        let unsupported = vec![l.think_open, k + 1, l.think_close, k, l.eos];
        assert_eq!(
            score_consistency(&unsupported, &l, &RuleBasedChecker).unwrap(),
            0.0
        );
        // Invalid format.
        let invalid = vec![k, l.think_close, k, l.eos];
        assert_eq!(
            score_consistency(&invalid, &l, &RuleBasedChecker).unwrap(),
            0.0
        );
    }

    #[test]
    fn combined_reward_weighting() {
        let w = RewardWeights::default();
        assert_eq!(combined_reward(1.0, 1.0, 1.0, &w).total, 4.0);
        assert_eq!(combined_reward(0.0, 0.0, 0.0, &w).total, 0.0);
        assert_eq!(combined_reward(0.5, 1.0, 0.0, &w).total, 2.0);
    }

    #[test]
    fn reward_total_is_bounded() {
        let l = layout();
        let inst = generate_instance(1, &TaskSpec::default(), &l, 8).unwrap();
        let w = RewardWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let len = rng.gen_range(1..12);
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..32)).collect();
            let r = score_completion(
                &tokens,
                &inst,
                &l,
                &w,
                AccuracyMode::Strict,
                &RuleBasedChecker,
            )
            .unwrap();
            assert!(r.total >= 0.0 && r.total <= w.max_total());
        }
    }

    #[test]
    fn instance_json_round_trip() {
        let l = layout();
        let inst = generate_instance(9, &TaskSpec::default(), &l, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instance.json");
        inst.export_json(&path).unwrap();
        let back = TaskInstance::import_json(&path).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn tag_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.json");
        std::fs::write(&path, r#"{"0": "PUNCT", "5": "NOUN", "7": "X"}"#).unwrap();
        let map = load_tag_map(&path).unwrap();
        assert_eq!(map.get(0), Some(Tag::Punct));
        assert_eq!(map.get(5), Some(Tag::Noun));
        assert_eq!(map.get(7), Some(Tag::X));
        assert_eq!(map.get(9), None);

        std::fs::write(&path, r#"{"0": "NOPE"}"#).unwrap();
        assert!(load_tag_map(&path).is_err());
    }
}
