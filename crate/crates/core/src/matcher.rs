//! Lexicon matcher: snaps a noisy transcript onto a list of known names.
//!
//! Stage one scores every entry with normalized Levenshtein similarity and
//! accepts on a high bar. Stage two rescored the same entries with the
//! Ratcliff/Obershelp ratio, which is more forgiving of transpositions and
//! partial overlaps. A query that clears neither bar maps to the sentinel
//! outcome "no".

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Characters the pipeline can represent; anything else is dropped during
/// normalization.
pub fn is_vocab_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '-'
}

/// Lowercase, drop out-of-vocabulary characters, trim, and collapse runs
/// of internal whitespace to a single space.
pub fn normalize_token(raw: &str) -> String {
    let lowered: String = raw
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|&c| is_vocab_char(c))
        .collect();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.trim().chars() {
        if c == ' ' {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Edit distance with unit-cost insert, delete, and substitute.
///
/// Two-row dynamic program over char counts, so multi-byte characters are
/// handled per character rather than per byte.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein similarity on a 0..=100 scale:
/// `(1 - D / max(|a|, |b|)) * 100`. Two empty strings score 100.
pub fn similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 100.0;
    }
    (1.0 - levenshtein(a, b) as f64 / max_len as f64) * 100.0
}

/// Ratcliff/Obershelp ratio on a 0..=100 scale: `200 * M / (|a| + |b|)`
/// where M counts characters inside recursively matched common blocks.
/// Two empty strings score 100.
pub fn fuzzy_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 100.0;
    }
    let m = matched_chars(&a, &b);
    200.0 * m as f64 / total as f64
}

/// Total characters covered by the recursive longest-common-block split.
fn matched_chars(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    matched_chars_in(a, b, &mut prev, &mut cur)
}

fn matched_chars_in(a: &[char], b: &[char], prev: &mut [usize], cur: &mut [usize]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let (ai, bi, len) = longest_common_block(a, b, prev, cur);
    if len == 0 {
        return 0;
    }
    len + matched_chars_in(&a[..ai], &b[..bi], prev, cur)
        + matched_chars_in(&a[ai + len..], &b[bi + len..], prev, cur)
}

/// Longest common contiguous block; earliest start in `a`, then in `b`,
/// wins ties (strictly-greater update keeps the first maximum in scan
/// order, and blocks are visited by ascending end position in both).
/// `prev` and `cur` are shared scratch rows of at least `b.len() + 1`.
fn longest_common_block(
    a: &[char],
    b: &[char],
    prev: &mut [usize],
    cur: &mut [usize],
) -> (usize, usize, usize) {
    let mut best = (0usize, 0usize, 0usize);
    // prev[j]: length of the common suffix ending at a[i - 1], b[j - 1]
    prev[..=b.len()].fill(0);
    cur[0] = 0;
    let (mut prev, mut cur) = (prev, cur);
    for i in 0..a.len() {
        for j in 0..b.len() {
            cur[j + 1] = if a[i] == b[j] { prev[j] + 1 } else { 0 };
            if cur[j + 1] > best.2 {
                best = (i + 1 - cur[j + 1], j + 1 - cur[j + 1], cur[j + 1]);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Ordered list of normalized, deduplicated medicine names.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<String>,
}

impl Lexicon {
    /// Build from raw names: normalize each, reject entries that normalize
    /// to nothing, drop exact duplicates, keep first-seen order.
    pub fn new(raw: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, name) in raw.into_iter().enumerate() {
            let norm = normalize_token(name.as_ref());
            if norm.is_empty() {
                return Err(Error::LexiconFormat {
                    line: i + 1,
                    reason: format!("entry {:?} normalizes to empty", name.as_ref()),
                });
            }
            if !entries.contains(&norm) {
                entries.push(norm);
            }
        }
        if entries.is_empty() {
            return Err(Error::LexiconFormat { line: 0, reason: "no entries".into() });
        }
        Ok(Lexicon { entries })
    }

    /// Load one name per line; blank lines and `#` comments are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let norm = normalize_token(line);
            if norm.is_empty() {
                return Err(Error::LexiconFormat {
                    line: i + 1,
                    reason: format!("entry {line:?} normalizes to empty"),
                });
            }
            if entries.contains(&norm) {
                eprintln!("warning: {}:{}: duplicate entry {norm:?} dropped", path.display(), i + 1);
            } else {
                entries.push(norm);
            }
        }
        if entries.is_empty() {
            return Err(Error::LexiconFormat { line: 0, reason: "no entries".into() });
        }
        Ok(Lexicon { entries })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Acceptance bars for the two stages, both on the 0..=100 scale.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    pub t_l: f64,
    pub t_f: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { t_l: 70.0, t_f: 80.0 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_l", self.t_l), ("t_f", self.t_f)] {
            if !(0.0..=100.0).contains(&v) || v.is_nan() {
                return Err(Error::Config(format!("{name} must be in 0..=100, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which stage produced the accepted name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStage {
    Levenshtein,
    Fuzzy,
}

/// Full decision record for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDecision {
    /// Accepted lexicon entry, or the sentinel "no".
    pub outcome: String,
    /// Stage that accepted, `None` when rejected.
    pub stage: Option<MatchStage>,
    /// Best Levenshtein similarity over the lexicon.
    pub s_l: f64,
    /// Best fuzzy ratio over the lexicon.
    pub s_f: f64,
}

impl MatchDecision {
    fn rejected(s_l: f64, s_f: f64) -> Self {
        MatchDecision { outcome: "no".into(), stage: None, s_l, s_f }
    }
}

/// Best entry by Levenshtein similarity. Ties break by smaller edit
/// distance, then lexicographically smaller entry.
///
/// The distance is at least the length gap, so the similarity is at most
/// `(1 - gap / max) * 100`; entries whose cap falls strictly below the
/// running best cannot win or tie and are skipped unscored. Rounding is
/// monotone, so the cap holds in floats exactly as it does over the reals.
fn best_by_similarity<'a>(lex: &'a Lexicon, query: &str) -> (&'a str, f64, usize) {
    let qn = query.chars().count();
    let mut best: Option<(&str, f64, usize)> = None;
    for entry in &lex.entries {
        let en = entry.chars().count();
        let max_len = qn.max(en).max(1);
        if let Some((_, bs, _)) = best {
            let cap = (1.0 - qn.abs_diff(en) as f64 / max_len as f64) * 100.0;
            if cap < bs {
                continue;
            }
        }
        let d = levenshtein(query, entry);
        let s = (1.0 - d as f64 / max_len as f64) * 100.0;
        let better = match best {
            None => true,
            Some((be, bs, bd)) => {
                s > bs || (s == bs && (d < bd || (d == bd && entry.as_str() < be)))
            }
        };
        if better {
            best = Some((entry, s, d));
        }
    }
    best.expect("lexicon is never empty")
}

/// Best entry by fuzzy ratio, same tie chain as stage one.
///
/// Matched blocks cover at most `min(|q|, |e|)` characters, so the ratio
/// is at most `200 * min / (|q| + |e|)`; entries whose cap falls strictly
/// below the running best cannot win or tie and are skipped unscored.
pub fn best_match<'a>(lex: &'a Lexicon, query: &str) -> (&'a str, f64) {
    let qn = query.chars().count();
    let mut best: Option<(&str, f64, usize)> = None;
    for entry in &lex.entries {
        if let Some((_, bs, _)) = best {
            let en = entry.chars().count();
            let cap = 200.0 * qn.min(en) as f64 / (qn + en) as f64;
            if cap < bs {
                continue;
            }
        }
        let s = fuzzy_ratio(query, entry);
        let d = levenshtein(query, entry);
        let better = match best {
            None => true,
            Some((be, bs, bd)) => {
                s > bs || (s == bs && (d < bd || (d == bd && entry.as_str() < be)))
            }
        };
        if better {
            best = Some((entry, s, d));
        }
    }
    let (e, s, _) = best.expect("lexicon is never empty");
    (e, s)
}

/// Two-stage decision for one raw query string.
///
/// The query is normalized first; a query that normalizes to empty is
/// rejected outright. Both stage scores are always computed so the
/// decision record is complete even when stage one accepts.
pub fn decide(lex: &Lexicon, raw_query: &str, th: Thresholds) -> MatchDecision {
    let query = normalize_token(raw_query);
    if query.is_empty() {
        return MatchDecision::rejected(0.0, 0.0);
    }
    let (lev_entry, s_l, _) = best_by_similarity(lex, &query);
    let (fuz_entry, s_f) = best_match(lex, &query);
    if s_l >= th.t_l {
        return MatchDecision {
            outcome: lev_entry.to_string(),
            stage: Some(MatchStage::Levenshtein),
            s_l,
            s_f,
        };
    }
    if s_f >= th.t_f {
        return MatchDecision {
            outcome: fuz_entry.to_string(),
            stage: Some(MatchStage::Fuzzy),
            s_l,
            s_f,
        };
    }
    MatchDecision::rejected(s_l, s_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-table Wagner-Fischer, kept separate from the two-row version
    /// above so the fast path has an independent check.
    fn levenshtein_table(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            t[i][0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
            }
        }
        t[a.len()][b.len()]
    }

    fn random_word(rng: &mut impl Rng, max_len: usize) -> String {
        let len = rng.gen_range(0..=max_len);
        (0..len).map(|_| (b'a' + rng.gen_range(0..4u8)) as char).collect()
    }

    #[test]
    fn levenshtein_hand_cases() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("panadol", "panadol"), 0);
        assert_eq!(levenshtein("amoxcillin", "amoxicillin"), 1);
    }

    #[test]
    fn levenshtein_matches_full_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let a = random_word(&mut rng, 12);
            let b = random_word(&mut rng, 12);
            assert_eq!(levenshtein(&a, &b), levenshtein_table(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn levenshtein_metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..2000 {
            let a = random_word(&mut rng, 8);
            let b = random_word(&mut rng, 8);
            let c = random_word(&mut rng, 8);
            assert_eq!(levenshtein(&a, &a), 0);
            assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }

    #[test]
    fn similarity_scale() {
        assert_eq!(similarity("", ""), 100.0);
        assert_eq!(similarity("abc", "abc"), 100.0);
        assert_eq!(similarity("abc", ""), 0.0);
        // D = 1 over max length 11
        let s = similarity("amoxcillin", "amoxicillin");
        assert!((s - (1.0 - 1.0 / 11.0) * 100.0).abs() < 1e-9);
    }

    #[test]
    fn fuzzy_hand_cases() {
        assert_eq!(fuzzy_ratio("", ""), 100.0);
        assert_eq!(fuzzy_ratio("abc", "abc"), 100.0);
        assert_eq!(fuzzy_ratio("abc", "xyz"), 0.0);
        // blocks "amox" and "cillin": M = 10, total = 21
        let s = fuzzy_ratio("amoxcillin", "amoxicillin");
        assert!((s - 2000.0 / 21.0).abs() < 1e-9);
        // "panado" block of 6 against "panadol": M = 6, total = 13... with
        // the trailing "1" unmatched on the query side: 200 * 6 / 14
        let s = fuzzy_ratio("panado1", "panadol");
        assert!((s - 1200.0 / 14.0).abs() < 1e-9);
    }

    #[test]
    fn fuzzy_is_100_exactly_for_equal_strings() {
        // The ratio is order sensitive in general (the earliest-block tie
        // break can split differently for swapped arguments), but a perfect
        // score still happens only on exact equality.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..300 {
            let a = random_word(&mut rng, 10);
            let b = random_word(&mut rng, 10);
            assert_eq!(fuzzy_ratio(&a, &a), 100.0);
            assert_eq!(fuzzy_ratio(&a, &b) == 100.0, a == b, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn fuzzy_bounded_and_positive_iff_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..300 {
            let a = random_word(&mut rng, 10);
            let b = random_word(&mut rng, 10);
            let s = fuzzy_ratio(&a, &b);
            assert!((0.0..=100.0).contains(&s));
            let overlap = a.chars().any(|c| b.contains(c));
            if !a.is_empty() && !b.is_empty() {
                assert_eq!(s > 0.0, overlap);
            }
        }
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize_token(" Panadol "), "panadol");
        assert_eq!(normalize_token("pan@dol!"), "pandol");
        assert_eq!(normalize_token("CO-AMOX"), "co-amox");
        assert_eq!(normalize_token("a   b\tc"), "a bc");
        assert_eq!(normalize_token("!!!"), "");
        assert_eq!(normalize_token("Vitamin  B12"), "vitamin b12");
    }

    #[test]
    fn lexicon_rejects_empty_entries() {
        assert!(Lexicon::new(["panadol", "!!!"]).is_err());
        assert!(Lexicon::new(Vec::<&str>::new()).is_err());
    }

    #[test]
    fn lexicon_dedups_after_normalization() {
        let lex = Lexicon::new(["Panadol", "panadol ", "aspirin"]).unwrap();
        assert_eq!(lex.entries(), &["panadol".to_string(), "aspirin".to_string()]);
    }

    #[test]
    fn decide_exact_hit_takes_stage_one() {
        let lex = Lexicon::new(["panadol", "aspirin", "amoxicillin"]).unwrap();
        let d = decide(&lex, "Panadol", Thresholds::default());
        assert_eq!(d.outcome, "panadol");
        assert_eq!(d.stage, Some(MatchStage::Levenshtein));
        assert_eq!(d.s_l, 100.0);
        assert_eq!(d.s_f, 100.0);
    }

    #[test]
    fn decide_one_edit_takes_stage_one() {
        let lex = Lexicon::new(["panadol", "aspirin", "amoxicillin"]).unwrap();
        let d = decide(&lex, "panado1", Thresholds::default());
        assert_eq!(d.outcome, "panadol");
        assert_eq!(d.stage, Some(MatchStage::Levenshtein));
        assert!((d.s_l - (1.0 - 1.0 / 7.0) * 100.0).abs() < 1e-9);
    }

    #[test]
    fn decide_stage_two_rescues_marginal_query() {
        // Against "amoxicillin": S_L for "amxcilin" is (1 - 3/11) * 100 = 72.7,
        // so raise T_L above it to force the fuzzy stage.
        let lex = Lexicon::new(["amoxicillin", "paracetamol"]).unwrap();
        let th = Thresholds { t_l: 80.0, t_f: 80.0 };
        let d = decide(&lex, "amxcilin", th);
        assert_eq!(d.stage, Some(MatchStage::Fuzzy));
        assert_eq!(d.outcome, "amoxicillin");
        assert!(d.s_l < 80.0 && d.s_f >= 80.0, "s_l={} s_f={}", d.s_l, d.s_f);
    }

    #[test]
    fn decide_garbage_is_rejected() {
        let lex = Lexicon::new(["panadol", "aspirin"]).unwrap();
        let d = decide(&lex, "zzzqqq", Thresholds::default());
        assert_eq!(d.outcome, "no");
        assert_eq!(d.stage, None);
    }

    #[test]
    fn decide_empty_after_normalization_is_rejected() {
        let lex = Lexicon::new(["panadol"]).unwrap();
        let d = decide(&lex, "@@@", Thresholds::default());
        assert_eq!(d.outcome, "no");
        assert_eq!(d.stage, None);
        assert_eq!(d.s_l, 0.0);
        assert_eq!(d.s_f, 0.0);
    }

    #[test]
    fn decide_tie_breaks_lexicographically() {
        // "abcf" scores S_F = 75 and D = 1 against both entries.
        let lex = Lexicon::new(["abce", "abcd"]).unwrap();
        let th = Thresholds { t_l: 101.0, t_f: 70.0 };
        let d = decide(&lex, "abcf", th);
        assert_eq!(d.outcome, "abcd");
        assert_eq!(d.stage, Some(MatchStage::Fuzzy));
    }

    #[test]
    fn decide_thresholds_are_inclusive() {
        let lex = Lexicon::new(["abcde"]).unwrap();
        // "abcdf": D = 1, S_L = 80 exactly.
        let d = decide(&lex, "abcdf", Thresholds { t_l: 80.0, t_f: 101.0 });
        assert_eq!(d.stage, Some(MatchStage::Levenshtein));
        // S_F = 2 * 4 / 10 * 100 = 80 exactly.
        let d = decide(&lex, "abcdf", Thresholds { t_l: 101.0, t_f: 80.0 });
        assert_eq!(d.stage, Some(MatchStage::Fuzzy));
        let d = decide(&lex, "abcdf", Thresholds { t_l: 80.1, t_f: 80.1 });
        assert_eq!(d.outcome, "no");
    }

    #[test]
    fn lexicon_load_skips_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("names.txt");
        std::fs::write(&path, "# header\npanadol\n\n  Aspirin  \n# tail\n").unwrap();
        let lex = Lexicon::load(&path).unwrap();
        assert_eq!(lex.entries(), &["panadol".to_string(), "aspirin".to_string()]);
    }

    #[test]
    fn lexicon_load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("names.txt");
        std::fs::write(&path, "panadol\n???\n").unwrap();
        let err = Lexicon::load(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
