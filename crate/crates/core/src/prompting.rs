//! Prompt templates and budget-aware rendering.
//!
//! A template file is a short `key: value` header followed by `[description]`,
//! `[demo]` and `[request]` sections:
//!
//! ```text
//! kind: classify
//! mode: carp
//! shot: few
//! field_headers: INPUT, CLUES, REASONING, SENTIMENT
//!
//! [description]
//! This is a sentiment classifier for input opinion snippets. ...
//! [demo]
//! INPUT: {text}
//! CLUES: {clues}
//! REASONING: {reasoning}
//! SENTIMENT: {label_word}
//! [request]
//! INPUT: {text}
//! ```
//!
//! Rendered prompts are the description, a blank line, then the demonstration
//! blocks and the request block one after another. Demonstrations that do not fit the
//! token budget are dropped from the front of the list.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augmenter::AugmentedDemonstration;
use crate::corpus::Verbalizer;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {origin}: {message}")]
    Template { origin: String, message: String },
    #[error("unbound slot {{{0}}}")]
    UnboundSlot(String),
    #[error("unbalanced brace in template text at byte {0}")]
    Brace(usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("prompt needs {needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Between the description and the first block.
pub const DESCRIPTION_SEPARATOR: &str = "\n\n";
/// Between consecutive demonstration and request blocks.
pub const BLOCK_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Vanilla,
    Cot,
    Carp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Zero,
    Few,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Classify,
    ClueGen,
    ReasonGen,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($ty))),
                }
            }
        }
    };
}

str_enum!(PromptMode { Vanilla => "vanilla", Cot => "cot", Carp => "carp" });
str_enum!(Shot { Zero => "zero", Few => "few" });
str_enum!(TemplateKind { Classify => "classify", ClueGen => "clue-gen", ReasonGen => "reason-gen" });

const SLOTS: [&str; 5] = ["text", "clues", "reasoning", "label_word", "labels"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Slot(String),
}

fn parse_pieces(src: &str) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut chars = src.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                chars.next();
                lit.push('{');
            }
            '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                chars.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some((_, '}')) => break,
                        Some((_, ch)) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        _ => return Err(PromptError::Brace(pos)),
                    }
                }
                if name.is_empty() {
                    return Err(PromptError::Brace(pos));
                }
                if !lit.is_empty() {
                    pieces.push(Piece::Lit(std::mem::take(&mut lit)));
                }
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err(PromptError::Brace(pos)),
            other => lit.push(other),
        }
    }
    if !lit.is_empty() {
        pieces.push(Piece::Lit(lit));
    }
    Ok(pieces)
}

/// Slot names referenced by a template text, in order of appearance.
pub fn slots_of(src: &str) -> Result<Vec<String>, PromptError> {
    Ok(parse_pieces(src)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            Piece::Lit(_) => None,
        })
        .collect())
}

/// Substitutes `{slot}` placeholders; `{{` and `}}` are literal braces.
pub fn fill<'a, F>(src: &str, lookup: F) -> Result<String, PromptError>
where
    F: Fn(&str) -> Option<&'a str>,
{
    let mut out = String::with_capacity(src.len());
    for piece in parse_pieces(src)? {
        match piece {
            Piece::Lit(s) => out.push_str(&s),
            Piece::Slot(name) => {
                out.push_str(lookup(&name).ok_or(PromptError::UnboundSlot(name))?);
            }
        }
    }
    Ok(out)
}

fn escape_braces(s: &str) -> String {
    s.replace('{', "{{").replace('}', "}}")
}

/// One demo-block line of the form `<prefix>{slot}`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct DemoLine {
    prefix: String,
    slot: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub mode: PromptMode,
    pub shot: Shot,
    pub field_headers: Vec<String>,
    pub description: String,
    pub demo_block: Option<String>,
    pub request_block: String,
    demo_lines: Vec<DemoLine>,
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl PromptTemplate {
    pub fn new(
        kind: TemplateKind,
        mode: PromptMode,
        shot: Shot,
        field_headers: Vec<String>,
        description: String,
        demo_block: Option<String>,
        request_block: String,
    ) -> Result<Self, PromptError> {
        let mut t = Self {
            kind,
            mode,
            shot,
            field_headers,
            description,
            demo_block,
            request_block,
            demo_lines: Vec::new(),
        };
        t.validate("<inline>")?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let src = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with_origin(&src, &path.display().to_string())
    }

    pub fn parse(src: &str) -> Result<Self, PromptError> {
        Self::parse_with_origin(src, "<string>")
    }

    fn parse_with_origin(src: &str, origin: &str) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template {
            origin: origin.to_string(),
            message,
        };
        let mut kind = TemplateKind::Classify;
        let mut mode = None;
        let mut shot = None;
        let mut headers = None;
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in src.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
                sections.push((trimmed[1..trimmed.len() - 1].to_string(), Vec::new()));
                continue;
            }
            if let Some((_, body)) = sections.last_mut() {
                body.push(line);
                continue;
            }
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: value` header line, got {trimmed:?}")))?;
            let value = value.trim();
            match key.trim() {
                "kind" => kind = value.parse().map_err(err)?,
                "mode" => mode = Some(value.parse::<PromptMode>().map_err(err)?),
                "shot" => shot = Some(value.parse::<Shot>().map_err(err)?),
                "field_headers" => {
                    headers = Some(
                        value
                            .split(',')
                            .map(|h| h.trim().to_string())
                            .filter(|h| !h.is_empty())
                            .collect::<Vec<_>>(),
                    )
                }
                "version" | "name" => {}
                other => return Err(err(format!("unknown header key {other:?}"))),
            }
        }
        let mut description = None;
        let mut demo = None;
        let mut request = None;
        for (name, body) in sections {
            let text = body.join("\n").trim_matches('\n').to_string();
            let slot = match name.as_str() {
                "description" => &mut description,
                "demo" => &mut demo,
                "request" => &mut request,
                other => return Err(err(format!("unknown section [{other}]"))),
            };
            if slot.replace(text).is_some() {
                return Err(err(format!("section [{name}] appears twice")));
            }
        }
        let mut t = Self {
            kind,
            mode: mode.ok_or_else(|| err("missing `mode` header".into()))?,
            shot: shot.unwrap_or(if demo.is_some() { Shot::Few } else { Shot::Zero }),
            field_headers: headers.ok_or_else(|| err("missing `field_headers` header".into()))?,
            description: description.ok_or_else(|| err("missing [description] section".into()))?,
            demo_block: demo,
            request_block: request.ok_or_else(|| err("missing [request] section".into()))?,
            demo_lines: Vec::new(),
        };
        t.validate(origin)?;
        Ok(t)
    }

    fn validate(&mut self, origin: &str) -> Result<(), PromptError> {
        let err = |message: String| PromptError::Template {
            origin: origin.to_string(),
            message,
        };
        if self.field_headers.is_empty() {
            return Err(err("field_headers is empty".into()));
        }
        for s in [&self.description, &self.request_block]
            .into_iter()
            .chain(self.demo_block.as_ref())
        {
            for slot in slots_of(s)? {
                if !SLOTS.contains(&slot.as_str()) {
                    return Err(err(format!("unknown slot {{{slot}}}")));
                }
            }
        }
        if slots_of(&self.description)?.iter().any(|s| s != "labels") {
            return Err(err("description may only reference {labels}".into()));
        }
        let request: BTreeSet<String> = slots_of(&self.request_block)?.into_iter().collect();
        match self.kind {
            TemplateKind::Classify => {
                if request != set(&["text"]) {
                    return Err(err("request block must reference exactly {text}".into()));
                }
                match (self.shot, &self.demo_block) {
                    (Shot::Zero, Some(_)) => return Err(err("zero-shot template has a [demo] section".into())),
                    (Shot::Few, None) => return Err(err("few-shot template needs a [demo] section".into())),
                    _ => {}
                }
            }
            TemplateKind::ClueGen => {
                if request != set(&["text", "label_word"]) {
                    return Err(err("clue-gen request must reference {text} and {label_word}".into()));
                }
            }
            TemplateKind::ReasonGen => {
                let want = match self.mode {
                    PromptMode::Carp => set(&["text", "label_word", "clues"]),
                    _ => set(&["text", "label_word"]),
                };
                if request != want {
                    return Err(err(format!(
                        "reason-gen ({}) request must reference {want:?}",
                        self.mode
                    )));
                }
            }
        }
        if let Some(demo) = &self.demo_block {
            let want = match self.mode {
                PromptMode::Vanilla => vec!["text", "label_word"],
                PromptMode::Cot => vec!["text", "reasoning", "label_word"],
                PromptMode::Carp => vec!["text", "clues", "reasoning", "label_word"],
            };
            let mut lines = Vec::new();
            for line in demo.lines() {
                let pieces = parse_pieces(line)?;
                let parsed = match pieces.as_slice() {
                    [Piece::Lit(prefix), Piece::Slot(slot)] => Some(DemoLine {
                        prefix: prefix.clone(),
                        slot: slot.clone(),
                    }),
                    _ => None,
                };
                let ok = parsed.as_ref().is_some_and(|dl| {
                    self.field_headers
                        .iter()
                        .any(|h| dl.prefix.starts_with(&format!("{h}:")))
                });
                if !ok {
                    return Err(err(format!(
                        "demo line {line:?} must be `<HEADER>: {{slot}}` with a declared header"
                    )));
                }
                lines.push(parsed.expect("checked above"));
            }
            let got: Vec<&str> = lines.iter().map(|l| l.slot.as_str()).collect();
            let mut sorted_got = got.clone();
            sorted_got.sort_unstable();
            let mut sorted_want = want.clone();
            sorted_want.sort_unstable();
            if sorted_got != sorted_want {
                return Err(err(format!(
                    "{} demo block must reference exactly {want:?}, got {got:?}",
                    self.mode
                )));
            }
            self.demo_lines = lines;
        }
        Ok(())
    }

    /// Header of the field holding the label (the last declared header).
    pub fn label_header(&self) -> &str {
        self.field_headers.last().map(String::as_str).unwrap_or_default()
    }

    /// Fills `{labels}` in the description with the verbalizer's choices.
    pub fn bind_labels(&self, verbalizer: &Verbalizer) -> Result<Self, PromptError> {
        let labels = verbalizer.choice_list();
        // re-escaped so the bound description is still valid template text
        let description =
            fill(&self.description, |slot| (slot == "labels").then_some(labels.as_str())).map(|s| escape_braces(&s))?;
        let mut bound = self.clone();
        bound.description = description;
        Ok(bound)
    }

    fn rendered_description(&self) -> Result<String, PromptError> {
        fill(&self.description, |_| None)
    }

    fn render_demo(&self, demo: &AugmentedDemonstration) -> Result<String, PromptError> {
        let block = self
            .demo_block
            .as_deref()
            .ok_or_else(|| PromptError::Precondition("template has no demo block".into()))?;
        fill(block, |slot| match slot {
            "text" => Some(demo.text.as_str()),
            "clues" => Some(demo.clues.as_str()),
            "reasoning" => Some(demo.reasoning.as_str()),
            "label_word" => Some(demo.label_word.as_str()),
            _ => None,
        })
    }
}

/// Token counting scheme.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Conservative subtoken estimate: alphanumeric runs and individual
/// punctuation characters each count as one word, times 1.35, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl HeuristicCounter {
    pub fn words(text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

impl TokenCounter for HeuristicCounter {
    fn name(&self) -> &str {
        "words-x1.35"
    }

    fn count(&self, text: &str) -> usize {
        (Self::words(text) * 135).div_ceil(100)
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

#[derive(Clone)]
pub struct TokenBudget {
    pub max_tokens: usize,
    pub counter: Arc<dyn TokenCounter>,
}

impl TokenBudget {
    pub const DEFAULT_MAX_TOKENS: usize = 4096;

    pub fn new(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            counter: Arc::new(HeuristicCounter),
        }
    }

    pub fn with_counter(max_tokens: usize, counter: Arc<dyn TokenCounter>) -> Self {
        Self { max_tokens, counter }
    }

    fn check(&self, text: &str) -> Result<usize, PromptError> {
        let needed = self.counter.count(text);
        if needed > self.max_tokens {
            Err(PromptError::BudgetExceeded {
                needed,
                budget: self.max_tokens,
            })
        } else {
            Ok(needed)
        }
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self::new(Self::DEFAULT_MAX_TOKENS)
    }
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("max_tokens", &self.max_tokens)
            .field("counter", &self.counter.name())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_count: usize,
    pub included_demo_ids: Vec<String>,
    pub dropped_demo_ids: Vec<String>,
}

fn require_kind(t: &PromptTemplate, kind: TemplateKind, shot: Option<Shot>) -> Result<(), PromptError> {
    if t.kind != kind {
        return Err(PromptError::Precondition(format!(
            "expected a {kind} template, got {}",
            t.kind
        )));
    }
    if let Some(shot) = shot {
        if t.shot != shot {
            return Err(PromptError::Precondition(format!(
                "expected a {shot}-shot template, got {}-shot",
                t.shot
            )));
        }
    }
    Ok(())
}

fn non_empty(what: &str, s: &str) -> Result<(), PromptError> {
    if s.trim().is_empty() {
        Err(PromptError::Precondition(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

fn single_block(
    template: &PromptTemplate,
    budget: &TokenBudget,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<RenderedPrompt, PromptError> {
    let desc = template.rendered_description()?;
    let values: Vec<(String, String)> = ["text", "clues", "label_word", "reasoning"]
        .iter()
        .filter_map(|s| lookup(s).map(|v| (s.to_string(), v)))
        .collect();
    let request = fill(&template.request_block, |slot| {
        values.iter().find(|(k, _)| k == slot).map(|(_, v)| v.as_str())
    })?;
    let text = format!("{desc}{DESCRIPTION_SEPARATOR}{request}");
    let token_count = budget.check(&text)?;
    Ok(RenderedPrompt {
        text,
        token_count,
        included_demo_ids: Vec::new(),
        dropped_demo_ids: Vec::new(),
    })
}

/// Description plus request block, no demonstrations.
pub fn render_zero_shot(
    template: &PromptTemplate,
    test_text: &str,
    budget: &TokenBudget,
) -> Result<RenderedPrompt, PromptError> {
    require_kind(template, TemplateKind::Classify, Some(Shot::Zero))?;
    non_empty("test text", test_text)?;
    single_block(template, budget, |s| (s == "text").then(|| test_text.to_string()))
}

/// Description, demonstrations in the given order, then the request block.
///
/// When the whole prompt exceeds the budget, demonstrations are dropped from
/// the front of `demos` until it fits.
pub fn render_few_shot(
    template: &PromptTemplate,
    demos: &[AugmentedDemonstration],
    test_text: &str,
    budget: &TokenBudget,
) -> Result<RenderedPrompt, PromptError> {
    require_kind(template, TemplateKind::Classify, Some(Shot::Few))?;
    non_empty("test text", test_text)?;
    let desc = template.rendered_description()?;
    let request = fill(&template.request_block, |s| (s == "text").then_some(test_text))?;
    let blocks = demos
        .iter()
        .map(|d| template.render_demo(d))
        .collect::<Result<Vec<_>, _>>()?;
    let assemble = |skip: usize| {
        let mut text = desc.clone();
        text.push_str(DESCRIPTION_SEPARATOR);
        for b in &blocks[skip..] {
            text.push_str(b);
            text.push_str(BLOCK_SEPARATOR);
        }
        text.push_str(&request);
        text
    };
    for skip in 0..=blocks.len() {
        let text = assemble(skip);
        let needed = budget.counter.count(&text);
        if needed <= budget.max_tokens {
            return Ok(RenderedPrompt {
                text,
                token_count: needed,
                included_demo_ids: demos[skip..].iter().map(|d| d.example_id.clone()).collect(),
                dropped_demo_ids: demos[..skip].iter().map(|d| d.example_id.clone()).collect(),
            });
        }
    }
    Err(PromptError::BudgetExceeded {
        needed: budget.counter.count(&assemble(blocks.len())),
        budget: budget.max_tokens,
    })
}

/// Clue-generation prompt conditioned on the gold label word.
pub fn render_clue_gen(
    template: &PromptTemplate,
    text: &str,
    label_word: &str,
    budget: &TokenBudget,
) -> Result<RenderedPrompt, PromptError> {
    require_kind(template, TemplateKind::ClueGen, None)?;
    non_empty("text", text)?;
    non_empty("label word", label_word)?;
    single_block(template, budget, |s| match s {
        "text" => Some(text.to_string()),
        "label_word" => Some(label_word.to_string()),
        _ => None,
    })
}

/// Reasoning-generation prompt from text, gold label and (for clue-based
/// templates) the generated clues.
pub fn render_reason_gen(
    template: &PromptTemplate,
    text: &str,
    label_word: &str,
    clues: Option<&str>,
    budget: &TokenBudget,
) -> Result<RenderedPrompt, PromptError> {
    require_kind(template, TemplateKind::ReasonGen, None)?;
    non_empty("text", text)?;
    non_empty("label word", label_word)?;
    let needs_clues = template.mode == PromptMode::Carp;
    if needs_clues {
        non_empty("clues", clues.unwrap_or_default())?;
    }
    single_block(template, budget, |s| match s {
        "text" => Some(text.to_string()),
        "label_word" => Some(label_word.to_string()),
        "clues" if needs_clues => clues.map(str::to_string),
        _ => None,
    })
}

/// Demonstration fields recovered from a rendered prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedDemo {
    pub text: Option<String>,
    pub clues: Option<String>,
    pub reasoning: Option<String>,
    pub label_word: Option<String>,
}

impl ParsedDemo {
    fn field_mut(&mut self, slot: &str) -> &mut Option<String> {
        match slot {
            "text" => &mut self.text,
            "clues" => &mut self.clues,
            "reasoning" => &mut self.reasoning,
            _ => &mut self.label_word,
        }
    }
}

/// Re-parses the demonstration blocks of a prompt rendered with `template`.
///
/// Field values are recovered verbatim as long as no value contains a line
/// that itself starts with one of the demo line prefixes.
pub fn parse_demo_blocks(template: &PromptTemplate, rendered: &str) -> Result<Vec<ParsedDemo>, PromptError> {
    if template.demo_lines.is_empty() {
        return Err(PromptError::Precondition("template has no demo block".into()));
    }
    let desc = template.rendered_description()?;
    let body = rendered
        .strip_prefix(desc.as_str())
        .and_then(|r| r.strip_prefix(DESCRIPTION_SEPARATOR))
        .ok_or_else(|| PromptError::Precondition("prompt does not start with the template description".into()))?;
    let first_prefix = &template.demo_lines[0].prefix;
    let mut records: Vec<ParsedDemo> = Vec::new();
    let mut open: Option<String> = None;
    for line in body.split('\n') {
        let hit = template
            .demo_lines
            .iter()
            .find(|dl| line.starts_with(dl.prefix.as_str()));
        match hit {
            Some(dl) => {
                if dl.prefix == *first_prefix || records.is_empty() {
                    records.push(ParsedDemo::default());
                }
                let rec = records.last_mut().expect("pushed above");
                *rec.field_mut(&dl.slot) = Some(line[dl.prefix.len()..].to_string());
                open = Some(dl.slot.clone());
            }
            None => {
                if let (Some(rec), Some(slot)) = (records.last_mut(), open.as_deref()) {
                    let field = rec.field_mut(slot).get_or_insert_with(String::new);
                    field.push('\n');
                    field.push_str(line);
                }
            }
        }
    }
    // the final record is the request block
    records.pop();
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_verbalizer, LabelSpace, VerbalizerStrategy};

    const CARP_FEW: &str = "kind: classify\nmode: carp\nshot: few\nfield_headers: INPUT, CLUES, REASONING, SENTIMENT\n\n[description]\nThis is a sentiment classifier for input opinion snippets.\nCategorize the overall SENTIMENT of input as {labels}.\n[demo]\nINPUT: {text}\nCLUES: {clues}\nREASONING: {reasoning}\nSENTIMENT: {label_word}\n[request]\nINPUT: {text}\n";
    const CARP_ZERO: &str = "mode: carp\nshot: zero\nfield_headers: INPUT, CLUES, REASONING, SENTIMENT\n[description]\nFirst, list CLUES.\n[request]\nINPUT: {text}\nCLUES:\n";
    const VANILLA_ZERO: &str = "mode: vanilla\nshot: zero\nfield_headers: INPUT, SENTIMENT\n[description]\nClassify.\n[request]\nINPUT: {text}\nSENTIMENT:\n";
    const CLUE_GEN: &str = "kind: clue-gen\nmode: carp\nfield_headers: INPUT, SENTIMENT\n[description]\nList CLUES (limit to 15 words).\n[request]\nINPUT: {text}\nSENTIMENT: {label_word}\n";
    const REASON_GEN: &str = "kind: reason-gen\nmode: carp\nfield_headers: INPUT, LABEL, CLUES, REASONING\n[description]\nArticulate the reasoning (limit to 50 words).\n[request]\nINPUT: {text}\nLABEL: {label_word}\nCLUES: {clues}\nREASONING:\n";

    fn demo(id: &str, text: &str) -> AugmentedDemonstration {
        AugmentedDemonstration {
            example_id: id.into(),
            text: text.into(),
            clues: "c".into(),
            reasoning: "r".into(),
            label_word: "Positive".into(),
            valid: true,
            invalid_reason: None,
        }
    }

    fn bound(src: &str) -> PromptTemplate {
        let v = build_verbalizer(
            &LabelSpace::new(["Negative", "Positive"]).unwrap(),
            VerbalizerStrategy::Annotation,
            None,
        )
        .unwrap();
        PromptTemplate::parse(src).unwrap().bind_labels(&v).unwrap()
    }

    #[test]
    fn heuristic_counter_examples() {
        let c = HeuristicCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("hello world"), 3);
        assert_eq!(HeuristicCounter::words("positive."), 2);
        assert_eq!(HeuristicCounter::words("don't"), 3);
    }

    #[test]
    fn zero_shot_carp_ends_with_clues_header() {
        let t = bound(CARP_ZERO);
        let p = render_zero_shot(&t, "great movie", &TokenBudget::default()).unwrap();
        assert!(p.text.ends_with("INPUT: great movie\nCLUES:"), "{:?}", p.text);
        assert!(p.included_demo_ids.is_empty());
        let v = bound(VANILLA_ZERO);
        assert!(render_zero_shot(&v, "x", &TokenBudget::default())
            .unwrap()
            .text
            .ends_with("SENTIMENT:"));
        assert!(matches!(
            render_zero_shot(&t, "  ", &TokenBudget::default()),
            Err(PromptError::Precondition(_))
        ));
        assert!(matches!(
            render_zero_shot(&t, "x", &TokenBudget::new(3)),
            Err(PromptError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn description_binds_labels() {
        let t = bound(CARP_FEW);
        assert!(t.description.contains("as Negative or Positive."));
    }

    #[test]
    fn few_shot_keeps_order_and_test_last() {
        let t = bound(CARP_FEW);
        let demos = [demo("d1", "first"), demo("d2", "second")];
        let p = render_few_shot(&t, &demos, "the test", &TokenBudget::default()).unwrap();
        assert_eq!(p.included_demo_ids, ["d1", "d2"]);
        assert!(p.dropped_demo_ids.is_empty());
        assert!(p.text.find("first").unwrap() < p.text.find("second").unwrap());
        assert!(p.text.ends_with("INPUT: the test"));
    }

    #[test]
    fn few_shot_drops_exactly_four_from_front() {
        let t = bound(CARP_FEW);
        let demos: Vec<_> = (0..16).map(|i| demo(&format!("d{i:02}"), "w")).collect();
        let counter = HeuristicCounter;
        // each demo block "INPUT: w\nCLUES: c\nREASONING: r\nSENTIMENT: Positive" is 12 words
        let full = render_few_shot(&t, &demos, "w", &TokenBudget::new(100_000)).unwrap();
        let full_words = HeuristicCounter::words(&full.text);
        let words_12 = full_words - 4 * 12;
        let budget = (words_12 * 135).div_ceil(100);
        // one more demo would not fit
        assert!(((words_12 + 12) * 135).div_ceil(100) > budget);
        let p = render_few_shot(&t, &demos, "w", &TokenBudget::new(budget)).unwrap();
        assert_eq!(p.dropped_demo_ids, ["d00", "d01", "d02", "d03"]);
        assert_eq!(p.included_demo_ids.len(), 12);
        assert!(p.token_count <= budget);
        assert_eq!(p.token_count, counter.count(&p.text));
    }

    #[test]
    fn few_shot_budget_too_small_for_test_block() {
        let t = bound(CARP_FEW);
        let err = render_few_shot(&t, &[demo("a", "x")], "y", &TokenBudget::new(5)).unwrap_err();
        assert!(matches!(err, PromptError::BudgetExceeded { .. }));
    }

    #[test]
    fn clue_and_reason_prompts() {
        let clue = bound(CLUE_GEN);
        let p = render_clue_gen(&clue, "great movie", "Positive", &TokenBudget::default()).unwrap();
        assert!(p.text.contains("INPUT: great movie"));
        assert!(p.text.ends_with("SENTIMENT: Positive"));
        assert!(render_clue_gen(&clue, "great movie", "", &TokenBudget::default()).is_err());
        assert!(matches!(
            render_clue_gen(&clue, "great movie", "Positive", &TokenBudget::new(10)),
            Err(PromptError::BudgetExceeded { .. })
        ));

        let reason = bound(REASON_GEN);
        let p = render_reason_gen(
            &reason,
            "great movie",
            "Positive",
            Some("great"),
            &TokenBudget::default(),
        )
        .unwrap();
        assert!(p
            .text
            .ends_with("INPUT: great movie\nLABEL: Positive\nCLUES: great\nREASONING:"));
        assert!(matches!(
            render_reason_gen(&reason, "t", "Positive", Some(""), &TokenBudget::default()),
            Err(PromptError::Precondition(_))
        ));
        let long = "clue ".repeat(5000);
        assert!(matches!(
            render_reason_gen(&reason, "t", "Positive", Some(&long), &TokenBudget::default()),
            Err(PromptError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn template_validation() {
        let bad_demo = CARP_FEW.replace("CLUES: {clues}\n", "");
        assert!(PromptTemplate::parse(&bad_demo).is_err());
        let vanilla_with_clues = "mode: vanilla\nshot: few\nfield_headers: INPUT, CLUES, SENTIMENT\n[description]\nd\n[demo]\nINPUT: {text}\nCLUES: {clues}\nSENTIMENT: {label_word}\n[request]\nINPUT: {text}\n";
        assert!(PromptTemplate::parse(vanilla_with_clues).is_err());
        let unknown = CARP_ZERO.replace("mode: carp", "mode: carp\ncolour: red");
        assert!(PromptTemplate::parse(&unknown).is_err());
        let bad_slot = CARP_ZERO.replace("{text}", "{txt}");
        assert!(PromptTemplate::parse(&bad_slot).is_err());
    }

    #[test]
    fn braces_escape() {
        assert_eq!(fill("a {{b}} {x}", |s| (s == "x").then_some("y")).unwrap(), "a {b} y");
        assert!(matches!(fill("{x}", |_| None), Err(PromptError::UnboundSlot(_))));
        assert!(fill("oops }", |_| None).is_err());
    }

    #[test]
    fn demo_blocks_reparse() {
        let t = bound(CARP_FEW);
        let mut d = demo("a", "multi\nline text: with colon");
        d.reasoning = "ends with space ".into();
        let demos = [d.clone(), demo("b", "two")];
        let p = render_few_shot(&t, &demos, "q", &TokenBudget::default()).unwrap();
        let parsed = parse_demo_blocks(&t, &p.text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].text.as_deref(), Some("multi\nline text: with colon"));
        assert_eq!(parsed[0].reasoning.as_deref(), Some("ends with space "));
        assert_eq!(parsed[1].label_word.as_deref(), Some("Positive"));
    }
}
