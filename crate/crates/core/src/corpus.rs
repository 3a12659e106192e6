//! Synthetic fact corpus, closed-vocabulary tokenization with subject and
//! relation span alignment, and Counterfact-format ingestion.
//!
//! Prompt templates end with the subject (`the R of S`, `R : S`, ...), so the
//! last subject token is also the position the object is read from. Subjects
//! are two-word names built from shared word pools. Objects are single tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::linalg::{RngStream, Sampler};
use crate::model::TrainExample;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("{what} {surface:?} not found in {text:?}")]
    SpanNotFound {
        what: &'static str,
        surface: String,
        text: String,
    },
    #[error("{what} {surface:?} occurs more than once in {text:?}")]
    AmbiguousSpan {
        what: &'static str,
        surface: String,
        text: String,
    },
    #[error("subject and relation spans overlap in {0:?}")]
    OverlappingSpans(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed word list; ids are positions. Serialized as the bare list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(words: Vec<String>) -> Result<Self, String> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary word {w:?}"));
            }
        }
        if !index.contains_key(UNK) {
            return Err(format!("vocabulary lacks {UNK}"));
        }
        Ok(Self { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Specials first, then `words` in first-seen order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<String> = vec![PAD.into(), UNK.into()];
        let mut index: HashMap<String, usize> =
            list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), list.len());
                list.push(w.to_string());
            }
        }
        Self { words: list, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| CorpusError::UnknownWord(w.into())))
            .collect()
    }

    /// Like [`encode`](Self::encode) but maps unknown words to `<unk>`;
    /// the flag reports whether that happened.
    pub fn encode_lossy(&self, text: &str) -> (Vec<usize>, bool) {
        let mut oov = false;
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    oov = true;
                    self.unk()
                })
            })
            .collect();
        (ids, oov)
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Token positions of the subject; may be empty for auxiliary prompts
    /// whose subject could not be located.
    pub subject_span: Range<usize>,
    pub relation_span: Range<usize>,
}

impl TokenizedPrompt {
    /// Position of the last subject token.
    pub fn last_subject_position(&self) -> Option<usize> {
        (!self.subject_span.is_empty()).then(|| self.subject_span.end - 1)
    }

    fn unaligned(text: String, tokens: Vec<usize>) -> Self {
        Self {
            text,
            tokens,
            subject_span: 0..0,
            relation_span: 0..0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub case_id: usize,
    pub subject: String,
    pub relation: String,
    pub prompt: TokenizedPrompt,
    pub target_new: usize,
    pub target_true: usize,
    pub paraphrase_prompts: Vec<TokenizedPrompt>,
    pub neighborhood_prompts: Vec<TokenizedPrompt>,
    pub attribution_prompts: Vec<TokenizedPrompt>,
    /// Set when ingestion mapped a word to `<unk>` or truncated a multi-word target.
    #[serde(default)]
    pub flagged: bool,
}

fn find_unique(
    haystack: &[&str],
    needle: &[&str],
    what: &'static str,
    text: &str,
) -> Result<Range<usize>, CorpusError> {
    let surface = needle.join(" ");
    if needle.is_empty() {
        return Err(CorpusError::Empty(what));
    }
    let hits: Vec<usize> = (0..=haystack.len().saturating_sub(needle.len()))
        .filter(|&i| haystack.len() >= needle.len() && haystack[i..i + needle.len()] == *needle)
        .collect();
    match hits.as_slice() {
        [] => Err(CorpusError::SpanNotFound {
            what,
            surface,
            text: text.into(),
        }),
        [i] => Ok(*i..*i + needle.len()),
        _ => Err(CorpusError::AmbiguousSpan {
            what,
            surface,
            text: text.into(),
        }),
    }
}

/// Whitespace tokenization over `vocab` with subject and relation spans
/// located by exact word alignment.
pub fn tokenize(
    text: &str,
    subject: &str,
    relation: &str,
    vocab: &Vocabulary,
) -> Result<TokenizedPrompt, CorpusError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let tokens = vocab.encode(text)?;
    let s: Vec<&str> = subject.split_whitespace().collect();
    let r: Vec<&str> = relation.split_whitespace().collect();
    let subject_span = find_unique(&words, &s, "subject", text)?;
    let relation_span = find_unique(&words, &r, "relation", text)?;
    if subject_span.start < relation_span.end && relation_span.start < subject_span.end {
        return Err(CorpusError::OverlappingSpans(text.into()));
    }
    Ok(TokenizedPrompt {
        text: words.join(" "),
        tokens,
        subject_span,
        relation_span,
    })
}

pub fn detokenize(tokens: &[usize], vocab: &Vocabulary) -> String {
    vocab.decode(tokens)
}

/// One slot of a template pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Subject,
    Relation,
    Word(&'static str),
}

use Slot::{Relation as R, Subject as S, Word as W};

/// Training and paraphrase patterns; index 0 is the canonical prompt.
const PATTERNS: &[&[Slot]] = &[
    &[W("the"), R, W("of"), S],
    &[W("what"), W("is"), W("the"), R, W("of"), S],
    &[R, W(":"), S],
    &[W("tell"), W("me"), W("the"), R, W("for"), S],
    &[W("the"), R, W("belonging"), W("to"), S],
];

/// Held out from training; used for attribution prompts.
const HELDOUT_PATTERNS: &[&[Slot]] = &[
    &[W("speaking"), W("of"), W("the"), R, W("of"), S],
    &[W("recall"), W("the"), R, W("known"), W("for"), S],
];

const RELATION_SURFACES: &[&str] = &[
    "native tongue",
    "home city",
    "favorite color",
    "main sport",
    "work field",
    "birth region",
    "chosen instrument",
    "lucky metal",
    "pet animal",
    "daily drink",
    "family crest",
    "ruling star",
];

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// A verbalization of one relation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    /// Whitespace-separated words with `{subject}` and `{relation}` placeholders.
    pub pattern: String,
}

impl Template {
    fn from_slots(slots: &[Slot]) -> Self {
        let words: Vec<&str> = slots
            .iter()
            .map(|s| match s {
                S => "{subject}",
                R => "{relation}",
                W(w) => w,
            })
            .collect();
        Self {
            pattern: words.join(" "),
        }
    }

    pub fn render(&self, subject: &str, relation: &str) -> String {
        self.pattern
            .split_whitespace()
            .map(|w| match w {
                "{subject}" => subject,
                "{relation}" => relation,
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    /// Training verbalizations per relation (canonical plus paraphrases).
    pub templates_per_relation: usize,
    /// Number of counterfactual edit requests to draw (distinct subjects).
    pub n_edits: usize,
    pub neighbors_per_request: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            n_relations: 2,
            n_objects: 10,
            templates_per_relation: 3,
            n_edits: 50,
            neighbors_per_request: 5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.n_subjects == 0 || self.n_relations == 0 {
            return bad("n_subjects and n_relations must be >= 1".into());
        }
        if self.n_objects < 2 {
            return bad("n_objects must be >= 2 so counterfactual targets exist".into());
        }
        if self.n_relations > RELATION_SURFACES.len() {
            return bad(format!(
                "at most {} relations are available",
                RELATION_SURFACES.len()
            ));
        }
        if self.templates_per_relation < 2 || self.templates_per_relation > PATTERNS.len() {
            return bad(format!(
                "templates_per_relation must be in 2..={}",
                PATTERNS.len()
            ));
        }
        if self.n_edits > self.n_subjects {
            return bad(format!(
                "{} edits need as many distinct subjects, only {} exist",
                self.n_edits, self.n_subjects
            ));
        }
        if self.neighbors_per_request > 0 && self.n_edits >= self.n_subjects {
            return bad("neighborhood prompts need subjects that are never edited".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub surface: String,
    pub templates: Vec<Template>,
    pub attribution_templates: Vec<Template>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocabulary: Vocabulary,
    pub subjects: Vec<String>,
    pub relations: Vec<RelationInfo>,
    pub objects: Vec<String>,
    /// Subject-major: fact `s * n_relations + r`.
    pub facts: Vec<FactTriple>,
    /// Every training verbalization, fact-major then template order.
    pub prompts: Vec<TokenizedPrompt>,
    /// `prompts[i]` verbalizes `facts[prompt_fact[i]]`.
    pub prompt_fact: Vec<usize>,
    pub requests: Vec<EditRequest>,
}

fn syllable(s: &mut Sampler) -> String {
    let c = CONSONANTS[s.below(CONSONANTS.len())];
    let v = VOWELS[s.below(VOWELS.len())];
    format!("{c}{v}")
}

fn fresh_word(s: &mut Sampler, n_syllables: usize, taken: &mut BTreeSet<String>) -> String {
    loop {
        let w: String = (0..n_syllables).map(|_| syllable(s)).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn function_words() -> BTreeSet<&'static str> {
    PATTERNS
        .iter()
        .chain(HELDOUT_PATTERNS)
        .flat_map(|p| p.iter())
        .filter_map(|s| match s {
            W(w) => Some(*w),
            _ => None,
        })
        .collect()
}

/// Builds the synthetic corpus and its counterfactual edit requests.
pub fn generate_corpus(cfg: &CorpusConfig, rng: &RngStream) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let mut s = rng.sampler();
    let mut taken: BTreeSet<String> = function_words().iter().map(|w| w.to_string()).collect();
    for r in RELATION_SURFACES {
        taken.extend(r.split_whitespace().map(String::from));
    }
    let objects: Vec<String> = (0..cfg.n_objects)
        .map(|_| fresh_word(&mut s, 3, &mut taken))
        .collect();
    let pool = (cfg.n_subjects as f64).sqrt().ceil() as usize + 2;
    let first: Vec<String> = (0..pool).map(|_| fresh_word(&mut s, 2, &mut taken)).collect();
    let second: Vec<String> = (0..pool).map(|_| fresh_word(&mut s, 2, &mut taken)).collect();
    let subjects: Vec<String> = s
        .sample_indices(pool * pool, cfg.n_subjects)
        .into_iter()
        .map(|i| format!("{} {}", first[i / pool], second[i % pool]))
        .collect();
    let relations: Vec<RelationInfo> = RELATION_SURFACES[..cfg.n_relations]
        .iter()
        .map(|surface| RelationInfo {
            surface: surface.to_string(),
            templates: PATTERNS[..cfg.templates_per_relation]
                .iter()
                .map(|p| Template::from_slots(p))
                .collect(),
            attribution_templates: HELDOUT_PATTERNS
                .iter()
                .map(|p| Template::from_slots(p))
                .collect(),
        })
        .collect();

    let mut facts = Vec::with_capacity(cfg.n_subjects * cfg.n_relations);
    let mut fact_object = Vec::with_capacity(facts.capacity());
    for subj in &subjects {
        for rel in &relations {
            let o = s.below(cfg.n_objects);
            fact_object.push(o);
            facts.push(FactTriple {
                subject: subj.clone(),
                relation: rel.surface.clone(),
                object: objects[o].clone(),
            });
        }
    }

    let vocab_words: Vec<String> = {
        let mut w: Vec<String> = function_words().iter().map(|w| w.to_string()).collect();
        for r in &relations {
            w.extend(r.surface.split_whitespace().map(String::from));
        }
        for subj in &subjects {
            w.extend(subj.split_whitespace().map(String::from));
        }
        w.extend(objects.iter().cloned());
        w
    };
    let vocabulary = Vocabulary::build(vocab_words.iter().map(String::as_str));

    let render = |fact: &FactTriple, t: &Template| -> Result<TokenizedPrompt, CorpusError> {
        tokenize(
            &t.render(&fact.subject, &fact.relation),
            &fact.subject,
            &fact.relation,
            &vocabulary,
        )
    };

    let mut prompts = Vec::new();
    let mut prompt_fact = Vec::new();
    for (fi, fact) in facts.iter().enumerate() {
        let rel = &relations[fi % cfg.n_relations];
        for t in &rel.templates {
            prompts.push(render(fact, t)?);
            prompt_fact.push(fi);
        }
    }

    let edited_subjects = s.sample_indices(cfg.n_subjects, cfg.n_edits);
    let edited: BTreeSet<usize> = edited_subjects.iter().copied().collect();
    let free_subjects: Vec<usize> = (0..cfg.n_subjects).filter(|i| !edited.contains(i)).collect();
    let mut requests = Vec::with_capacity(cfg.n_edits);
    for (case_id, &si) in edited_subjects.iter().enumerate() {
        let ri = s.below(cfg.n_relations);
        let fi = si * cfg.n_relations + ri;
        let fact = &facts[fi];
        let rel = &relations[ri];
        let true_obj = fact_object[fi];
        let new_obj = (true_obj + 1 + s.below(cfg.n_objects - 1)) % cfg.n_objects;
        let take = cfg.neighbors_per_request.min(free_subjects.len());
        let neighborhood_prompts = s
            .sample_indices(free_subjects.len(), take)
            .into_iter()
            .map(|j| render(&facts[free_subjects[j] * cfg.n_relations + ri], &rel.templates[0]))
            .collect::<Result<Vec<_>, _>>()?;
        requests.push(EditRequest {
            case_id,
            subject: fact.subject.clone(),
            relation: fact.relation.clone(),
            prompt: render(fact, &rel.templates[0])?,
            target_new: vocabulary.id(&objects[new_obj]).expect("object in vocabulary"),
            target_true: vocabulary.id(&objects[true_obj]).expect("object in vocabulary"),
            paraphrase_prompts: rel.templates[1..]
                .iter()
                .map(|t| render(fact, t))
                .collect::<Result<_, _>>()?,
            neighborhood_prompts,
            attribution_prompts: rel
                .attribution_templates
                .iter()
                .map(|t| render(fact, t))
                .collect::<Result<_, _>>()?,
            flagged: false,
        });
    }

    Ok(Corpus {
        config: cfg.clone(),
        vocabulary,
        subjects,
        relations,
        objects,
        facts,
        prompts,
        prompt_fact,
        requests,
    })
}

impl Corpus {
    pub fn object_id(&self, fact: usize) -> usize {
        self.vocabulary
            .id(&self.facts[fact].object)
            .expect("object in vocabulary")
    }

    /// Every training prompt paired with its fact's object token.
    pub fn training_examples(&self) -> Vec<TrainExample> {
        self.prompts
            .iter()
            .zip(&self.prompt_fact)
            .map(|(p, &f)| TrainExample {
                tokens: p.tokens.clone(),
                target: self.object_id(f),
            })
            .collect()
    }

    /// Token documents (prompt followed by its object) used as the IDF corpus.
    pub fn documents(&self) -> Vec<Vec<usize>> {
        self.training_examples()
            .into_iter()
            .map(|mut ex| {
                ex.tokens.push(ex.target);
                ex.tokens
            })
            .collect()
    }

    /// Training texts whose subject is not among `exclude_subjects` (for K0 estimation).
    pub fn texts_excluding(&self, exclude_subjects: &[&str]) -> Vec<Vec<usize>> {
        self.prompts
            .iter()
            .zip(&self.prompt_fact)
            .filter(|(_, &f)| !exclude_subjects.contains(&self.facts[f].subject.as_str()))
            .map(|(p, _)| p.tokens.clone())
            .collect()
    }

    /// Reference document for consistency: every corpus document ending in `object`.
    pub fn reference_text(&self, object: usize) -> Vec<usize> {
        self.documents()
            .into_iter()
            .filter(|d| d.last() == Some(&object))
            .flatten()
            .collect()
    }
}

/// One Counterfact record that could not be turned into a request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("record {index}: {message}")]
pub struct RecordError {
    pub index: usize,
    /// Missing or malformed fields, as JSON paths.
    pub fields: Vec<String>,
    pub message: String,
}

fn str_field<'a>(v: &'a Value, path: &[&str]) -> Option<&'a str> {
    let mut cur = v;
    for p in path {
        cur = cur.get(p)?;
    }
    cur.as_str()
}

fn str_list(v: &Value, key: &str) -> Option<Vec<String>> {
    match v.get(key) {
        None => Some(Vec::new()),
        Some(Value::Array(items)) => items.iter().map(|x| x.as_str().map(String::from)).collect(),
        Some(_) => None,
    }
}

/// Target strings may be given as `{"str": ...}` or as a bare string.
fn target_field(v: &Value, key: &str) -> Option<String> {
    let t = v.get("requested_rewrite")?.get(key)?;
    match t {
        Value::String(s) => Some(s.clone()),
        other => other.get("str")?.as_str().map(String::from),
    }
}

/// Relation surface of a `{}` template: the longest run of words outside the
/// subject placeholder (the first on ties).
fn relation_from_template(template: &str) -> Option<String> {
    let words: Vec<&str> = template.split_whitespace().collect();
    let mut runs: Vec<Vec<&str>> = vec![Vec::new()];
    for w in words {
        if w.contains("{}") {
            runs.push(Vec::new());
        } else {
            runs.last_mut().expect("non-empty").push(w);
        }
    }
    let mut best: Option<&Vec<&str>> = None;
    for r in &runs {
        if !r.is_empty() && best.is_none_or(|b| r.len() > b.len()) {
            best = Some(r);
        }
    }
    best.map(|b| b.join(" "))
}

fn lossy_prompt(
    text: &str,
    subject: &str,
    relation: &str,
    vocab: &Vocabulary,
    flagged: &mut bool,
) -> TokenizedPrompt {
    let words: Vec<&str> = text.split_whitespace().collect();
    let (tokens, oov) = vocab.encode_lossy(text);
    *flagged |= oov;
    let s: Vec<&str> = subject.split_whitespace().collect();
    let r: Vec<&str> = relation.split_whitespace().collect();
    let mut p = TokenizedPrompt::unaligned(words.join(" "), tokens);
    if let Ok(span) = find_unique(&words, &s, "subject", text) {
        p.subject_span = span;
    }
    if let Ok(span) = find_unique(&words, &r, "relation", text) {
        if span.start >= p.subject_span.end || span.end <= p.subject_span.start {
            p.relation_span = span;
        }
    }
    p
}

fn ingest_record(
    index: usize,
    rec: &Value,
    vocab: &Vocabulary,
) -> Result<EditRequest, RecordError> {
    let mut missing = Vec::new();
    let template = str_field(rec, &["requested_rewrite", "prompt"]);
    let subject = str_field(rec, &["requested_rewrite", "subject"]);
    let new = target_field(rec, "target_new");
    let true_ = target_field(rec, "target_true");
    if template.is_none() {
        missing.push("requested_rewrite.prompt".to_string());
    }
    if subject.is_none() {
        missing.push("requested_rewrite.subject".to_string());
    }
    if new.is_none() {
        missing.push("requested_rewrite.target_new".to_string());
    }
    if true_.is_none() {
        missing.push("requested_rewrite.target_true".to_string());
    }
    let lists: Vec<(&str, Option<Vec<String>>)> = ["paraphrase_prompts", "neighborhood_prompts", "attribute_prompts"]
        .iter()
        .map(|k| (*k, str_list(rec, k)))
        .collect();
    for (k, v) in &lists {
        if v.is_none() {
            missing.push(k.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(RecordError {
            index,
            message: format!("missing or malformed fields: {}", missing.join(", ")),
            fields: missing,
        });
    }
    let (template, subject) = (template.expect("checked"), subject.expect("checked"));
    let fail = |message: String| RecordError {
        index,
        fields: Vec::new(),
        message,
    };
    if !template.contains("{}") {
        return Err(RecordError {
            index,
            fields: vec!["requested_rewrite.prompt".into()],
            message: "prompt has no {} subject placeholder".into(),
        });
    }
    let relation = relation_from_template(template)
        .ok_or_else(|| fail("prompt has no words besides the subject".into()))?;
    let text = template.replacen("{}", subject, 1);
    let mut flagged = false;
    let prompt = lossy_prompt(&text, subject, &relation, vocab, &mut flagged);
    if prompt.subject_span.is_empty() {
        return Err(fail(format!("subject {subject:?} not located in {text:?}")));
    }
    let mut object_token = |s: String| {
        let words: Vec<&str> = s.split_whitespace().collect();
        let Some(first) = words.first() else {
            return Err(fail("empty target".into()));
        };
        if words.len() > 1 {
            flagged = true;
        }
        Ok(vocab.id(first).unwrap_or_else(|| {
            flagged = true;
            vocab.unk()
        }))
    };
    let target_new = object_token(new.expect("checked"))?;
    let target_true = object_token(true_.expect("checked"))?;
    if target_new == target_true {
        return Err(RecordError {
            index,
            fields: vec!["requested_rewrite.target_new".into()],
            message: "target_new and target_true map to the same token".into(),
        });
    }
    let mut lists = lists.into_iter().map(|(_, v)| v.expect("checked"));
    let mut aux = |texts: Vec<String>| -> Vec<TokenizedPrompt> {
        texts
            .iter()
            .map(|t| lossy_prompt(t, subject, &relation, vocab, &mut flagged))
            .collect()
    };
    let paraphrase_prompts = aux(lists.next().expect("three lists"));
    let neighborhood_prompts = aux(lists.next().expect("three lists"));
    let attribution_prompts = aux(lists.next().expect("three lists"));
    let case_id = rec
        .get("case_id")
        .and_then(Value::as_u64)
        .map_or(index, |c| c as usize);
    Ok(EditRequest {
        case_id,
        subject: subject.to_string(),
        relation,
        prompt,
        target_new,
        target_true,
        paraphrase_prompts,
        neighborhood_prompts,
        attribution_prompts,
        flagged,
    })
}

/// Parses a JSON array of Counterfact records. Every record yields either a
/// request or a [`RecordError`] carrying its index.
pub fn parse_counterfact(
    json: &str,
    vocab: &Vocabulary,
) -> Result<Vec<Result<EditRequest, RecordError>>, CorpusError> {
    let records: Vec<Value> = serde_json::from_str(json)?;
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| ingest_record(i, r, vocab))
        .collect())
}

pub fn ingest_counterfact(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<Result<EditRequest, RecordError>>, CorpusError> {
    parse_counterfact(&fs::read_to_string(path)?, vocab)
}
