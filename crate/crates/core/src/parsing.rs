//! Prompt rendering and verbalized-confidence parsing.
//!
//! Responses are expected to carry a JSON object keyed `"1".."k"` with
//! percentages. Anything else degrades gracefully: a bounded regex
//! fallback, then neutral imputation at 0.5.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Value assigned to options whose confidence could not be read.
pub const NEUTRAL_VERBAL: f64 = 0.5;

/// Maximum distance between an option identifier and its number in the
/// regex fallback.
pub const FALLBACK_LOOKAHEAD: usize = 12;

/// Largest number the regex fallback accepts as a percentage.
pub const FALLBACK_MAX_VALUE: f64 = 150.0;

const DEFAULT_TEMPLATE: &str = include_str!("../assets/default_prompt.txt");
const REQUIRED_PLACEHOLDERS: [&str; 2] = ["question", "options"];

/// Option labels shown to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelAlphabet {
    /// `1..k`
    #[default]
    Numeric,
    /// `A..`, at most 26 options
    Letters,
}

impl LabelAlphabet {
    pub fn labels(&self, k: usize) -> Result<Vec<String>> {
        match self {
            LabelAlphabet::Numeric => Ok((1..=k).map(|i| i.to_string()).collect()),
            LabelAlphabet::Letters if k <= 26 => Ok((0..k).map(|i| char::from(b'A' + i as u8).to_string()).collect()),
            LabelAlphabet::Letters => Err(Error::Config(format!(
                "letter labels support at most 26 options, got {k}"
            ))),
        }
    }

    /// Maps a label to its 0-based option index. Numeric keys are always
    /// accepted since the confidence object is keyed `1..k`.
    pub fn index_of(&self, label: &str, k: usize) -> Option<usize> {
        let label = label.trim();
        if !label.is_empty() && label.bytes().all(|b| b.is_ascii_digit()) {
            return label
                .parse::<usize>()
                .ok()
                .filter(|i| (1..=k).contains(i))
                .map(|i| i - 1);
        }
        match self {
            LabelAlphabet::Letters => {
                let mut chars = label.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_uppercase() => {
                        let idx = (c as u8 - b'A') as usize;
                        (idx < k).then_some(idx)
                    }
                    _ => None,
                }
            }
            LabelAlphabet::Numeric => None,
        }
    }
}

/// Prompt text with `{question}`, `{options}`, `{k}`, `{labels}` and
/// `{keys}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    pub alphabet: LabelAlphabet,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: DEFAULT_TEMPLATE.to_string(),
            alphabet: LabelAlphabet::Numeric,
        }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, alphabet: LabelAlphabet) -> Result<Self> {
        let template = PromptTemplate {
            text: text.into(),
            alphabet,
        };
        template.check_placeholders()?;
        Ok(template)
    }

    pub fn from_file(path: impl AsRef<Path>, alphabet: LabelAlphabet) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text, alphabet)
    }

    fn check_placeholders(&self) -> Result<()> {
        for name in REQUIRED_PLACEHOLDERS {
            if !self.text.contains(&format!("{{{name}}}")) {
                return Err(Error::Config(format!(
                    "prompt template lacks the {{{name}}} placeholder"
                )));
            }
        }
        Ok(())
    }

    /// Single-pass substitution: text inserted for a placeholder is never
    /// scanned again, so braces inside questions or options are literal.
    pub fn render(&self, question: &str, options: &[String]) -> Result<String> {
        self.check_placeholders()?;
        let k = options.len();
        if k < 2 {
            return Err(Error::Usage(format!("need at least 2 options, got {k}")));
        }
        let labels = self.alphabet.labels(k)?;
        let option_block = labels
            .iter()
            .zip(options)
            .map(|(label, text)| format!("{label}. {text}"))
            .collect::<Vec<_>>()
            .join("\n");
        let keys = (1..=k).map(|i| format!("\"{i}\"")).collect::<Vec<_>>().join(", ");

        let mut out = String::with_capacity(self.text.len() + option_block.len() + question.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let substituted = after.find('}').and_then(|close| {
                let value = match &after[..close] {
                    "question" => question.to_string(),
                    "options" => option_block.clone(),
                    "k" => k.to_string(),
                    "labels" => labels.join(", "),
                    "keys" => keys.clone(),
                    _ => return None,
                };
                Some((value, close))
            });
            match substituted {
                Some((value, close)) => {
                    out.push_str(&value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbalSource {
    Json,
    RegexFallback,
    AllImputed,
}

/// Verbalized confidence vector in `[0, 1]^k`. Not renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerbal {
    pub values: Vec<f64>,
    pub missing_mask: Vec<bool>,
    pub source: VerbalSource,
}

impl ParsedVerbal {
    fn from_entries(entries: Vec<Option<f64>>, source: VerbalSource) -> Self {
        let missing_mask = entries.iter().map(Option::is_none).collect();
        let values = entries.into_iter().map(|v| v.unwrap_or(NEUTRAL_VERBAL)).collect();
        ParsedVerbal {
            values,
            missing_mask,
            source,
        }
    }

    /// JSON object with percentages for the observed entries only.
    pub fn to_canonical_json(&self) -> String {
        let body = self
            .values
            .iter()
            .zip(&self.missing_mask)
            .enumerate()
            .filter(|(_, (_, &missing))| !missing)
            .map(|(i, (v, _))| format!("\"{}\": {:.4}", i + 1, v * 100.0))
            .collect::<Vec<_>>()
            .join(", ");
        format!("{{{body}}}")
    }
}

/// All-neutral vector used when a response carries no usable confidence.
pub fn default_verbal(k: usize) -> Result<ParsedVerbal> {
    if k < 2 {
        return Err(Error::Usage(format!("need at least 2 options, got {k}")));
    }
    Ok(ParsedVerbal::from_entries(vec![None; k], VerbalSource::AllImputed))
}

/// Parses a model response into per-option confidences.
///
/// Never fails on content; only `k < 2` is rejected.
pub fn parse_verbal_response(text: &str, k: usize, alphabet: &LabelAlphabet) -> Result<ParsedVerbal> {
    if k < 2 {
        return Err(Error::Usage(format!("need at least 2 options, got {k}")));
    }
    if let Some(entries) = json_entries(text, k, alphabet) {
        return Ok(ParsedVerbal::from_entries(entries, VerbalSource::Json));
    }
    if let Some(entries) = regex_entries(text, k, alphabet) {
        return Ok(ParsedVerbal::from_entries(entries, VerbalSource::RegexFallback));
    }
    default_verbal(k)
}

/// Percentage to unit interval: clip to [0, 100], divide by 100.
fn normalize_percent(value: f64) -> f64 {
    value.clamp(0.0, 100.0) / 100.0
}

/// Parses a decimal literal keeping at most four fractional digits.
fn truncated_number(literal: &str) -> Option<f64> {
    let literal = literal.trim();
    if literal.contains(['e', 'E']) {
        let x: f64 = literal.parse().ok()?;
        return x.is_finite().then(|| (x * 1e4).trunc() / 1e4);
    }
    let cut = match literal.find('.') {
        Some(dot) => {
            let frac_end = literal[dot + 1..]
                .char_indices()
                .nth(4)
                .map_or(literal.len(), |(i, _)| dot + 1 + i);
            &literal[..frac_end]
        }
        None => literal,
    };
    let x: f64 = cut.parse().ok()?;
    x.is_finite().then_some(x)
}

fn json_value_number(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => truncated_number(&n.to_string()),
        Value::String(s) => {
            let s = s.trim();
            let s = s.strip_suffix('%').unwrap_or(s).trim_end();
            if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit() || b == b'.' || b == b'-') {
                truncated_number(s)
            } else {
                None
            }
        }
        _ => None,
    }
}

/// End offset (exclusive) of the object opening at `start`, tracking
/// string literals so braces inside strings are ignored.
fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First complete JSON object that maps at least one option to a number.
fn json_entries(text: &str, k: usize, alphabet: &LabelAlphabet) -> Option<Vec<Option<f64>>> {
    let bytes = text.as_bytes();
    for (start, _) in text.match_indices('{') {
        let Some(end) = matching_brace(bytes, start) else {
            continue;
        };
        let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) else {
            continue;
        };
        let mut entries = vec![None; k];
        let mut found = false;
        for (key, value) in &map {
            let (Some(idx), Some(x)) = (alphabet.index_of(key, k), json_value_number(value)) else {
                continue;
            };
            if entries[idx].is_none() {
                entries[idx] = Some(normalize_percent(x));
                found = true;
            }
        }
        if found {
            return Some(entries);
        }
    }
    None
}

fn fallback_tokens() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?P<num>\d+(?:\.\d+)?)|\b(?P<letter>[A-Z])\b").expect("valid regex"))
}

enum Token<'a> {
    Number { start: usize, end: usize, literal: &'a str },
    Letter { start: usize, end: usize, index: usize },
}

impl Token<'_> {
    fn span(&self) -> (usize, usize) {
        match *self {
            Token::Number { start, end, .. } | Token::Letter { start, end, .. } => (start, end),
        }
    }

    fn option_index(&self, k: usize) -> Option<usize> {
        match *self {
            Token::Number { literal, .. } if !literal.contains('.') => literal
                .parse::<usize>()
                .ok()
                .filter(|i| (1..=k).contains(i))
                .map(|i| i - 1),
            Token::Letter { index, .. } => Some(index),
            Token::Number { .. } => None,
        }
    }
}

/// Scans `(option id, number)` pairs. A number consumed as a value is
/// never reused as an identifier; the first value per option wins.
fn regex_entries(text: &str, k: usize, alphabet: &LabelAlphabet) -> Option<Vec<Option<f64>>> {
    let tokens: Vec<Token> = fallback_tokens()
        .captures_iter(text)
        .filter_map(|cap| {
            if let Some(m) = cap.name("num") {
                return Some(Token::Number {
                    start: m.start(),
                    end: m.end(),
                    literal: m.as_str(),
                });
            }
            let m = cap.name("letter")?;
            if *alphabet != LabelAlphabet::Letters {
                return None;
            }
            let index = alphabet.index_of(m.as_str(), k)?;
            Some(Token::Letter {
                start: m.start(),
                end: m.end(),
                index,
            })
        })
        .collect();

    let mut entries = vec![None; k];
    let mut found = false;
    let mut i = 0;
    while i < tokens.len() {
        let paired = tokens[i].option_index(k).and_then(|idx| {
            let Some(Token::Number { start, literal, .. }) = tokens.get(i + 1) else {
                return None;
            };
            let gap = &text[tokens[i].span().1..*start];
            if gap.chars().count() > FALLBACK_LOOKAHEAD {
                return None;
            }
            let value = truncated_number(literal)?;
            (value <= FALLBACK_MAX_VALUE).then_some((idx, value))
        });
        match paired {
            Some((idx, value)) => {
                if entries[idx].is_none() {
                    entries[idx] = Some(normalize_percent(value));
                    found = true;
                }
                i += 2;
            }
            None => i += 1,
        }
    }
    found.then_some(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, k: usize) -> ParsedVerbal {
        parse_verbal_response(text, k, &LabelAlphabet::Numeric).unwrap()
    }

    #[test]
    fn well_formed_json() {
        let p = parse(r#"{"1": 80, "2": 10, "3": 5, "4": 5}"#, 4);
        assert_eq!(p.values, vec![0.80, 0.10, 0.05, 0.05]);
        assert_eq!(p.missing_mask, vec![false; 4]);
        assert_eq!(p.source, VerbalSource::Json);
    }

    #[test]
    fn missing_key_imputed() {
        let p = parse(r#"{"1": 80, "2": 10, "4": 5}"#, 4);
        assert_eq!(p.values[2], 0.5);
        assert_eq!(p.missing_mask, vec![false, false, true, false]);
    }

    #[test]
    fn out_of_range_clipped() {
        let p = parse(r#"{"1": 150, "2": -3}"#, 2);
        assert_eq!(p.values, vec![1.0, 0.0]);
    }

    #[test]
    fn regex_fallback() {
        let p = parse("Option 1: 70, option 2: 30 maybe", 2);
        assert_eq!(p.values, vec![0.7, 0.3]);
        assert_eq!(p.source, VerbalSource::RegexFallback);
    }

    #[test]
    fn not_renormalized() {
        let p = parse(r#"{"1":90,"2":90}"#, 2);
        assert_eq!(p.values, vec![0.9, 0.9]);
    }

    #[test]
    fn nothing_usable() {
        let p = parse("I am not sure about this one.", 3);
        assert_eq!(p.values, vec![0.5; 3]);
        assert_eq!(p.missing_mask, vec![true; 3]);
        assert_eq!(p.source, VerbalSource::AllImputed);
        assert_eq!(p, default_verbal(3).unwrap());
    }

    #[test]
    fn k_below_two_is_usage_error() {
        assert!(matches!(
            parse_verbal_response("{}", 1, &LabelAlphabet::Numeric),
            Err(Error::Usage(_))
        ));
        assert!(default_verbal(0).is_err());
    }

    #[test]
    fn first_complete_object_wins() {
        let p = parse(r#"2 {"1": 20, "2": 70} then {"1": 99, "2": 1}"#, 2);
        assert_eq!(p.values, vec![0.2, 0.7]);
    }

    #[test]
    fn decimals_truncated_to_four_places() {
        let p = parse(r#"{"1": 12.345678, "2": "33.33339%"}"#, 2);
        assert_eq!(p.values, vec![12.3456 / 100.0, 33.3333 / 100.0]);
    }

    #[test]
    fn letter_keys_with_letter_alphabet() {
        let p = parse_verbal_response(r#"B {"A": 10, "B": 85, "C": 5}"#, 3, &LabelAlphabet::Letters).unwrap();
        assert_eq!(p.values, vec![0.1, 0.85, 0.05]);
        let p = parse_verbal_response("A: 20 and B: 75", 3, &LabelAlphabet::Letters).unwrap();
        assert_eq!(p.values, vec![0.2, 0.75, 0.5]);
        // letters are not identifiers under the numeric alphabet
        let p = parse("A: 20 and B: 75", 3);
        assert_eq!(p.source, VerbalSource::AllImputed);
    }

    #[test]
    fn regex_lookahead_is_bounded() {
        let p = parse("1 ......................... 70, 2: 30", 2);
        assert_eq!(p.values, vec![0.5, 0.3]);
        assert_eq!(p.missing_mask, vec![true, false]);
    }

    #[test]
    fn regex_rejects_values_above_150() {
        let p = parse("1: 400, 2: 30", 2);
        assert_eq!(p.values, vec![0.5, 0.3]);
    }

    #[test]
    fn canonical_reparse_is_stable() {
        let p = parse(r#"{"1": 12.3456, "3": 100}"#, 3);
        let again = parse(&p.to_canonical_json(), 3);
        assert_eq!(p.values, again.values);
        assert_eq!(p.missing_mask, again.missing_mask);
    }

    #[test]
    fn render_default_template() {
        let t = PromptTemplate::default();
        let prompt = t.render("Which is red?", &["apple".into(), "sky".into()]).unwrap();
        assert!(prompt.contains("1. apple"));
        assert!(prompt.contains("2. sky"));
        assert!(prompt.contains(r#""1", "2""#));
        assert!(prompt.contains("Which is red?"));
        assert_eq!(
            prompt,
            t.render("Which is red?", &["apple".into(), "sky".into()]).unwrap()
        );
    }

    #[test]
    fn render_leaves_option_braces_alone() {
        let t = PromptTemplate::default();
        let prompt = t
            .render("{options}?", &["{question}".into(), "a {k} b".into()])
            .unwrap();
        assert!(prompt.contains("Question: {options}?"));
        assert!(prompt.contains("1. {question}"));
        assert!(prompt.contains("2. a {k} b"));
    }

    #[test]
    fn render_letter_labels() {
        let t = PromptTemplate::new(PromptTemplate::default().text, LabelAlphabet::Letters).unwrap();
        let opts: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let prompt = t.render("q", &opts).unwrap();
        assert!(prompt.contains("(A, B, C, D)"));
        assert!(prompt.contains("D. z"));
    }

    #[test]
    fn template_without_placeholder_rejected() {
        assert!(matches!(
            PromptTemplate::new("no slots {question}", LabelAlphabet::Numeric),
            Err(Error::Config(_))
        ));
    }
}
