//! Semantics-preserving perturbations of flattened token streams.
//!
//! Six transformation kinds are supported ([`SiteKind`]): renaming local
//! variables, parameters, and fields; replacing boolean literals; and
//! inserting `print ( <slot> )` or `if false : <slot> = 1` templates at
//! statement boundaries. A [`PerturbSite`] names a location where one of these
//! may act; a [`PerturbationPlan`] fixes concrete tokens for a subset of
//! sites. Applying a plan is exactly invertible: [`strip_perturbations`]
//! recovers the original stream from a [`PerturbedSnippet`] and its plan.
//!
//! Streams carry no indentation, so site discovery works from token
//! classification heuristics rather than a parser: tokens between the leading
//! `(` and its matching `)` are parameters, tokens following `self .` are
//! fields, left-hand sides of top-level `=` are locals, and statement
//! boundaries are found with a bracket-depth counter. The heuristics are
//! deliberately conservative — a stream they cannot interpret simply yields
//! fewer sites.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeSnippet, CorpusError, Vocabulary};

/// Errors produced while validating or applying perturbation plans.
#[derive(Debug, Error)]
pub enum TransformError {
    #[error("site {0:?} does not belong to the snippet's extracted site set")]
    SiteNotFound(Box<PerturbSite>),
    #[error("assigned token `{0}` is not in the vocabulary")]
    TokenNotInVocab(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("duplicate assignment: {0}")]
    DuplicateAssignment(String),
    #[error("replace sites overlap at token index {0}")]
    OverlappingSites(usize),
    #[error("plan is inconsistent with the perturbed tokens: {0}")]
    InconsistentPlan(String),
    #[error("malformed plan record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("plan record references unknown snippet `{0}`")]
    UnknownOrigin(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The closed set of transformation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    RenameLocalVar,
    RenameParam,
    RenameField,
    ReplaceBoolLiteral,
    InsertPrint,
    InsertDeadCode,
}

impl SiteKind {
    /// Returns `true` for the rename/replace kinds that act on existing
    /// tokens, `false` for the insert kinds.
    #[must_use]
    pub fn is_replace(self) -> bool {
        !matches!(self, SiteKind::InsertPrint | SiteKind::InsertDeadCode)
    }
}

/// Every fixed token the insert templates can splice into a stream. Streams
/// produced by [`apply_plan`] contain no tokens outside the original stream,
/// the assigned tokens, and this set — vocabulary builders should include it.
pub const TEMPLATE_TOKENS: [&str; 8] = ["print", "(", ")", "if", "false", ":", "=", "1"];

/// Token-level template spliced by an insert site, with `filler` in the slot
/// position.
#[must_use]
pub fn insert_template(kind: SiteKind, filler: &str) -> Vec<String> {
    match kind {
        SiteKind::InsertPrint => ["print", "(", filler, ")"].map(str::to_owned).to_vec(),
        SiteKind::InsertDeadCode => ["if", "false", ":", filler, "=", "1"]
            .map(str::to_owned)
            .to_vec(),
        _ => panic!("not an insert kind: {kind:?}"),
    }
}

/// Length of an insert kind's template (6 for dead code, 4 for print).
#[must_use]
pub fn template_len(kind: SiteKind) -> usize {
    match kind {
        SiteKind::InsertPrint => 4,
        SiteKind::InsertDeadCode => 6,
        _ => panic!("not an insert kind: {kind:?}"),
    }
}

/// Offset of the optimizer-chosen slot within an insert kind's template.
#[must_use]
pub fn template_slot(kind: SiteKind) -> usize {
    match kind {
        SiteKind::InsertPrint => 2,
        SiteKind::InsertDeadCode => 3,
        _ => panic!("not an insert kind: {kind:?}"),
    }
}

/// A candidate transformation location.
///
/// Replace kinds carry the strictly increasing list of every token index of
/// the target identifier/literal in `anchors` and the original token in
/// `target`. Insert kinds carry the single gap index in `anchors` (a gap `g`
/// lies between tokens `g-1` and `g`; `g == len` is the end of the stream) and
/// an `ordinal` distinguishing stacked slots at the same gap. `slot` is the
/// template offset receiving the optimizer-chosen token (0 for replace kinds:
/// the occurrence itself).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbSite {
    pub kind: SiteKind,
    pub anchors: Vec<usize>,
    #[serde(default)]
    pub ordinal: usize,
    #[serde(default)]
    pub slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl PerturbSite {
    fn replace(kind: SiteKind, anchors: Vec<usize>, target: &str) -> Self {
        PerturbSite {
            kind,
            anchors,
            ordinal: 0,
            slot: 0,
            target: Some(target.to_owned()),
        }
    }

    fn insert(kind: SiteKind, gap: usize, ordinal: usize) -> Self {
        PerturbSite {
            kind,
            anchors: vec![gap],
            ordinal,
            slot: template_slot(kind),
            target: None,
        }
    }

    /// The gap index of an insert site.
    #[must_use]
    pub fn gap(&self) -> usize {
        debug_assert!(!self.kind.is_replace());
        self.anchors[0]
    }
}

/// One concrete (site, token) choice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub site: PerturbSite,
    pub token: String,
}

/// A discrete perturbation: at most one token assignment per site.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub assignments: Vec<Assignment>,
}

impl PerturbationPlan {
    /// The empty plan (identity transformation).
    #[must_use]
    pub fn empty() -> Self {
        PerturbationPlan::default()
    }

    /// Number of assignments.
    #[must_use]
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    /// Returns `true` for the empty plan.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// A token stream after applying a plan, carrying everything needed to invert
/// it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedSnippet {
    pub tokens: Vec<String>,
    pub plan: PerturbationPlan,
    pub origin_id: String,
    pub origin_label: String,
}

impl PerturbedSnippet {
    /// Space-joined rendering, as fed to prompts.
    #[must_use]
    pub fn render_tokens(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Python keywords plus the lowercase literal spellings that appear in
/// flattened streams, plus `self` and `print`. Never renamed, never proposed
/// as a rename/insert filler.
const RESERVED: &[&str] = &[
    "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del", "elif",
    "else", "except", "false", "finally", "for", "from", "global", "if", "import", "in", "is",
    "lambda", "none", "nonlocal", "not", "or", "pass", "print", "raise", "return", "self", "true",
    "try", "while", "with", "yield",
];

/// Returns `true` when `token` is in the reserved-word list (case-insensitive,
/// so `True`/`None` spellings are also protected).
#[must_use]
pub fn is_reserved(token: &str) -> bool {
    let lower = token.to_ascii_lowercase();
    RESERVED.binary_search(&lower.as_str()).is_ok()
}

/// Returns `true` when `token` has identifier shape (`[A-Za-z_][A-Za-z0-9_]*`)
/// and is not reserved. These are the tokens eligible as rename targets,
/// rename replacements, and insert-slot fillers.
#[must_use]
pub fn is_identifier(token: &str) -> bool {
    let mut chars = token.chars();
    let head_ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_');
    head_ok && token.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !is_reserved(token)
}

const STATEMENT_STARTERS: &[&str] = &[
    "break", "continue", "del", "elif", "else", "except", "finally", "for", "if", "pass", "raise",
    "return", "try", "while", "with",
];

fn is_starter(token: &str) -> bool {
    STATEMENT_STARTERS.binary_search(&token).is_ok()
}

fn depth_delta(token: &str) -> i64 {
    match token {
        "(" | "[" | "{" => 1,
        ")" | "]" | "}" => -1,
        _ => 0,
    }
}

/// A statement span is "complete" when it already has a top-level `=` with a
/// non-empty right-hand side, or ends by closing a bracket back to depth 0 —
/// the shapes after which a fresh statement can begin.
fn span_complete(tokens: &[String]) -> bool {
    let mut depth = 0i64;
    for (i, t) in tokens.iter().enumerate() {
        if depth == 0 && t == "=" && i + 1 < tokens.len() {
            return true;
        }
        depth += depth_delta(t);
    }
    matches!(tokens.last().map(String::as_str), Some(")" | "]" | "}"))
}

/// Returns `true` when an assignment statement begins at `i`: an identifier
/// run (optionally led by `self .`) immediately followed by `=`.
fn begins_assignment(tokens: &[String], i: usize) -> bool {
    let mut j = i;
    if tokens[j] == "self" {
        if tokens.get(j + 1).map(String::as_str) != Some(".") {
            return false;
        }
        j += 2;
    }
    let run_start = j;
    while j < tokens.len() && is_identifier(&tokens[j]) {
        j += 1;
    }
    j > run_start && tokens.get(j).map(String::as_str) == Some("=")
}

/// Splits a stream into statement spans `[start, end)` using a bracket-depth
/// counter: a statement ends after a top-level `:`, or before a keyword
/// starter or a fresh assignment once the current span is complete.
#[must_use]
pub fn statement_spans(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut depth = 0i64;
    let mut start = 0usize;
    for i in 0..tokens.len() {
        if depth == 0 && i > start {
            let after_colon = tokens[i - 1] == ":";
            let splits = after_colon
                || (span_complete(&tokens[start..i])
                    && (is_starter(&tokens[i]) || begins_assignment(tokens, i)));
            if splits {
                spans.push((start, i));
                start = i;
            }
        }
        depth = (depth + depth_delta(&tokens[i])).max(0);
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

/// A gap hosts insertions only when the statement ending there looks finished:
/// it ends with `:`, closes a bracket, or carries a completed assignment.
/// This keeps fragments like a bare literal from attracting insert sites.
fn gap_worthy(span_tokens: &[String]) -> bool {
    span_tokens.last().map(String::as_str) == Some(":") || span_complete(span_tokens)
}

/// Statement-boundary gaps eligible for insert sites, in stream order. The
/// trailing end-of-stream gap is included when the final statement qualifies.
#[must_use]
pub fn insert_gaps(tokens: &[String]) -> Vec<usize> {
    statement_spans(tokens)
        .iter()
        .filter(|(s, e)| gap_worthy(&tokens[*s..*e]))
        .map(|(_, e)| *e)
        .collect()
}

/// Enumerates every perturbation site of a snippet, deterministically.
///
/// Replace sites come first — parameters, then fields, then locals (one site
/// per unique identifier token, classified by that priority), then one
/// [`SiteKind::ReplaceBoolLiteral`] site per boolean-literal occurrence.
/// Insert sites follow: each statement-boundary gap offers a
/// [`SiteKind::InsertDeadCode`] and a [`SiteKind::InsertPrint`] slot,
/// alternating in that order, with the trailing gap doubled (ordinals 0 and 1)
/// so stacked end-of-stream insertions are expressible. At most
/// `max_insert_slots` insert sites are returned.
#[must_use]
pub fn extract_sites(snippet: &CodeSnippet, max_insert_slots: usize) -> Vec<PerturbSite> {
    let tokens = &snippet.tokens;
    let mut sites = Vec::new();
    let mut claimed: HashSet<&str> = HashSet::new();

    // Parameters: identifier tokens between the leading "(" and its match.
    let mut param_names: Vec<&str> = Vec::new();
    if tokens.first().map(String::as_str) == Some("(") {
        let mut depth = 0i64;
        for t in tokens.iter() {
            depth += depth_delta(t);
            if depth == 0 {
                break;
            }
            if depth >= 1 && is_identifier(t) && claimed.insert(t) {
                param_names.push(t);
            }
        }
    }

    // Fields: identifier runs following "self .".
    let mut field_names: Vec<&str> = Vec::new();
    for i in 0..tokens.len().saturating_sub(1) {
        if tokens[i] == "self" && tokens[i + 1] == "." {
            let mut j = i + 2;
            while j < tokens.len() && is_identifier(&tokens[j]) {
                if claimed.insert(&tokens[j]) {
                    field_names.push(&tokens[j]);
                }
                j += 1;
            }
        }
    }

    // Locals: identifier runs forming the left-hand side of a top-level "=".
    let mut local_names: Vec<&str> = Vec::new();
    for (s, e) in statement_spans(tokens) {
        let span = &tokens[s..e];
        let mut depth = 0i64;
        for (off, t) in span.iter().enumerate() {
            if depth == 0 && t == "=" {
                let lhs = &span[..off];
                if !lhs.is_empty() && lhs.iter().all(|t| is_identifier(t)) {
                    for t in lhs {
                        if claimed.insert(t) {
                            local_names.push(t);
                        }
                    }
                }
                break;
            }
            depth += depth_delta(t);
        }
    }

    let occurrences = |name: &str| -> Vec<usize> {
        tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() == name)
            .map(|(i, _)| i)
            .collect()
    };
    for name in param_names {
        sites.push(PerturbSite::replace(
            SiteKind::RenameParam,
            occurrences(name),
            name,
        ));
    }
    for name in field_names {
        sites.push(PerturbSite::replace(
            SiteKind::RenameField,
            occurrences(name),
            name,
        ));
    }
    for name in local_names {
        sites.push(PerturbSite::replace(
            SiteKind::RenameLocalVar,
            occurrences(name),
            name,
        ));
    }

    // Boolean literals: one positional site per occurrence.
    for (i, t) in tokens.iter().enumerate() {
        if t == "true" || t == "false" {
            sites.push(PerturbSite::replace(
                SiteKind::ReplaceBoolLiteral,
                vec![i],
                t,
            ));
        }
    }

    // Insert slots at statement boundaries, alternating dead-code / print.
    let end = tokens.len();
    let mut inserted = 0usize;
    let mut push_insert = |sites: &mut Vec<PerturbSite>, kind, gap, ordinal| {
        if inserted < max_insert_slots {
            sites.push(PerturbSite::insert(kind, gap, ordinal));
            inserted += 1;
        }
    };
    for gap in insert_gaps(tokens) {
        let ordinals = if gap == end { 2 } else { 1 };
        for ordinal in 0..ordinals {
            push_insert(&mut sites, SiteKind::InsertDeadCode, gap, ordinal);
            push_insert(&mut sites, SiteKind::InsertPrint, gap, ordinal);
        }
    }
    sites
}

/// Validates a plan against the full site universe of `snippet` and the
/// vocabulary, enforcing the semantics-preservation rules:
///
/// - every site must come from [`extract_sites`] (insert-slot cap ignored);
/// - assigned tokens must be vocabulary members;
/// - boolean sites accept only `true` / `false`;
/// - rename sites accept only identifier-shaped, non-reserved tokens that do
///   not already occur in the snippet (capture guard), with distinct tokens
///   across the plan's rename assignments;
/// - insert slots accept only identifier-shaped, non-reserved fillers;
/// - at most one assignment per site and per insert (gap, ordinal).
pub fn validate_plan(
    snippet: &CodeSnippet,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
) -> Result<(), TransformError> {
    let universe: HashSet<PerturbSite> = extract_sites(snippet, usize::MAX).into_iter().collect();
    let mut seen_sites: HashSet<&PerturbSite> = HashSet::new();
    let mut seen_gaps: HashSet<(usize, usize)> = HashSet::new();
    let mut rename_tokens: HashSet<&str> = HashSet::new();
    let existing: HashSet<&str> = snippet.tokens.iter().map(String::as_str).collect();

    for Assignment { site, token } in &plan.assignments {
        if !universe.contains(site) {
            return Err(TransformError::SiteNotFound(Box::new(site.clone())));
        }
        if !seen_sites.insert(site) {
            return Err(TransformError::DuplicateAssignment(format!(
                "site {site:?} assigned twice"
            )));
        }
        if vocab.lookup(token).is_none() {
            return Err(TransformError::TokenNotInVocab(token.clone()));
        }
        match site.kind {
            SiteKind::ReplaceBoolLiteral => {
                if token != "true" && token != "false" {
                    return Err(TransformError::InvalidAssignment(format!(
                        "boolean site requires a boolean literal, got `{token}`"
                    )));
                }
            }
            SiteKind::RenameLocalVar | SiteKind::RenameParam | SiteKind::RenameField => {
                if !is_identifier(token) {
                    return Err(TransformError::InvalidAssignment(format!(
                        "rename requires a fresh identifier, got `{token}`"
                    )));
                }
                if existing.contains(token.as_str()) {
                    return Err(TransformError::InvalidAssignment(format!(
                        "rename to `{token}` would capture an existing identifier"
                    )));
                }
                if !rename_tokens.insert(token) {
                    return Err(TransformError::InvalidAssignment(format!(
                        "rename token `{token}` used by two sites"
                    )));
                }
            }
            SiteKind::InsertPrint | SiteKind::InsertDeadCode => {
                if !is_identifier(token) {
                    return Err(TransformError::InvalidAssignment(format!(
                        "insert slot requires an identifier filler, got `{token}`"
                    )));
                }
                if !seen_gaps.insert((site.gap(), site.ordinal)) {
                    return Err(TransformError::DuplicateAssignment(format!(
                        "two templates at gap {} ordinal {}",
                        site.gap(),
                        site.ordinal
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Applies a validated plan: replace kinds substitute every occurrence of
/// their target; insert kinds splice their templates right-to-left (by gap,
/// then ordinal, descending) so earlier indices stay valid.
pub fn apply_plan(
    snippet: &CodeSnippet,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
) -> Result<PerturbedSnippet, TransformError> {
    validate_plan(snippet, plan, vocab)?;
    let mut tokens = snippet.tokens.clone();
    for Assignment { site, token } in plan.assignments.iter().filter(|a| a.site.kind.is_replace())
    {
        for &i in &site.anchors {
            tokens[i] = token.clone();
        }
    }
    let mut inserts: Vec<&Assignment> = plan
        .assignments
        .iter()
        .filter(|a| !a.site.kind.is_replace())
        .collect();
    inserts.sort_by_key(|a| std::cmp::Reverse((a.site.gap(), a.site.ordinal)));
    for a in inserts {
        let template = insert_template(a.site.kind, &a.token);
        tokens.splice(a.site.gap()..a.site.gap(), template);
    }
    Ok(PerturbedSnippet {
        tokens,
        plan: plan.clone(),
        origin_id: snippet.id.clone(),
        origin_label: snippet.label.clone(),
    })
}

/// Inverts [`apply_plan`] exactly: removes the spliced templates and restores
/// every replaced occurrence, verifying the recorded plan against the tokens.
pub fn strip_perturbations(perturbed: &PerturbedSnippet) -> Result<CodeSnippet, TransformError> {
    let mut inserts: Vec<&Assignment> = perturbed
        .plan
        .assignments
        .iter()
        .filter(|a| !a.site.kind.is_replace())
        .collect();
    inserts.sort_by_key(|a| (a.site.gap(), a.site.ordinal));

    let mut tokens = perturbed.tokens.clone();
    let mut offset = 0usize;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for a in &inserts {
        let len = template_len(a.site.kind);
        let start = a.site.gap() + offset;
        let expected = insert_template(a.site.kind, &a.token);
        if tokens.len() < start + len || tokens[start..start + len] != expected[..] {
            return Err(TransformError::InconsistentPlan(format!(
                "expected {:?} template at position {start}",
                a.site.kind
            )));
        }
        spans.push((start, start + len));
        offset += len;
    }
    for &(start, end) in spans.iter().rev() {
        tokens.drain(start..end);
    }

    for a in perturbed
        .plan
        .assignments
        .iter()
        .filter(|a| a.site.kind.is_replace())
    {
        let target = a.site.target.as_deref().ok_or_else(|| {
            TransformError::InconsistentPlan("replace site without a recorded target".into())
        })?;
        for &i in &a.site.anchors {
            if tokens.get(i).map(String::as_str) != Some(a.token.as_str()) {
                return Err(TransformError::InconsistentPlan(format!(
                    "expected `{}` at token index {i}",
                    a.token
                )));
            }
            tokens[i] = target.to_owned();
        }
    }

    Ok(CodeSnippet::new(
        perturbed.origin_id.clone(),
        tokens,
        perturbed.origin_label.clone(),
    )?)
}

/// How a row of a [`SlotProgram`] is built from the relaxed attack variables
/// `(z, u)`; `site` indexes into [`SlotProgram::sites`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// Original token kept verbatim: a one-hot row with mass 1.
    Fixed { token: String },
    /// Occurrence of a replace site: `(1 − z_s)·onehot(token) + z_s·u_s`.
    ReplaceSlot { site: usize, token: String },
    /// Fixed token of an insert template: `z_s·onehot(token)` (mass `z_s`).
    InsertFixed { site: usize, token: String },
    /// The chosen token of an insert template: `z_s·u_s` (mass `z_s`).
    InsertSlot { site: usize },
}

/// The augmented program over which the attack evaluates relaxed mixtures:
/// the original stream with every insert site's template spliced in and every
/// site's slot marked. With all sites deselected (`z = 0`) the mixture
/// evaluates exactly to the original program.
#[derive(Clone, Debug)]
pub struct SlotProgram {
    /// One row per augmented token position.
    pub rows: Vec<RowKind>,
    /// The site list the row annotations index into.
    pub sites: Vec<PerturbSite>,
    /// Per site, the row positions that read the site's `u` vector.
    pub slot_positions: Vec<Vec<usize>>,
}

/// Builds the [`SlotProgram`] for a snippet and its extracted sites.
///
/// Errors when two replace sites claim the same token position.
pub fn instantiate_slots(
    snippet: &CodeSnippet,
    sites: &[PerturbSite],
) -> Result<SlotProgram, TransformError> {
    let n = snippet.tokens.len();
    let mut row_site: HashMap<usize, usize> = HashMap::new();
    for (s, site) in sites.iter().enumerate() {
        if site.kind.is_replace() {
            for &i in &site.anchors {
                if row_site.insert(i, s).is_some() {
                    return Err(TransformError::OverlappingSites(i));
                }
            }
        }
    }

    let mut rows: Vec<RowKind> = snippet
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match row_site.get(&i) {
            Some(&s) => RowKind::ReplaceSlot {
                site: s,
                token: t.clone(),
            },
            None => RowKind::Fixed { token: t.clone() },
        })
        .collect();

    // Splice insert templates in ascending (gap, ordinal) order; each splice
    // shifts later gaps by its template length.
    let mut order: Vec<usize> = (0..sites.len())
        .filter(|&s| !sites[s].kind.is_replace())
        .collect();
    order.sort_by_key(|&s| (sites[s].gap(), sites[s].ordinal));
    let mut offset = 0usize;
    let mut slot_row: HashMap<usize, usize> = HashMap::new();
    for &s in &order {
        let site = &sites[s];
        let start = site.gap() + offset;
        let template = insert_template(site.kind, "\u{0}");
        let slot = template_slot(site.kind);
        let spliced: Vec<RowKind> = template
            .iter()
            .enumerate()
            .map(|(off, t)| {
                if off == slot {
                    RowKind::InsertSlot { site: s }
                } else {
                    RowKind::InsertFixed {
                        site: s,
                        token: t.clone(),
                    }
                }
            })
            .collect();
        rows.splice(start..start, spliced);
        slot_row.insert(s, start + slot);
        offset += template.len();
    }
    debug_assert_eq!(rows.len(), n + offset);

    // Row positions reading each site's u vector, in final coordinates.
    let mut slot_positions: Vec<Vec<usize>> = vec![Vec::new(); sites.len()];
    for (pos, row) in rows.iter().enumerate() {
        match row {
            RowKind::ReplaceSlot { site, .. } | RowKind::InsertSlot { site } => {
                slot_positions[*site].push(pos);
            }
            _ => {}
        }
    }

    Ok(SlotProgram {
        rows,
        sites: sites.to_vec(),
        slot_positions,
    })
}

/// One line of the plan dump format: enough to re-apply or strip a plan
/// deterministically given the original snippet.
#[derive(Debug, Serialize, Deserialize)]
struct PlanRecord {
    origin_id: String,
    kind: SiteKind,
    anchors: Vec<usize>,
    token: String,
}

/// Writes plans as newline-delimited `{origin_id, kind, anchors, token}`
/// records, one record per assignment. Replace assignments keep plan order;
/// insert assignments are written in (gap, ordinal) order so that
/// [`load_plans`]'s arrival-order ordinal reconstruction recovers the exact
/// splice sequence.
pub fn dump_plans(
    path: &std::path::Path,
    plans: &[(String, PerturbationPlan)],
) -> Result<(), TransformError> {
    let mut out = String::new();
    for (origin_id, plan) in plans {
        let mut assignments: Vec<&Assignment> = plan.assignments.iter().collect();
        assignments.sort_by_key(|a| {
            if a.site.kind.is_replace() {
                (0, 0, 0)
            } else {
                (1, a.site.gap(), a.site.ordinal)
            }
        });
        for a in assignments {
            let record = PlanRecord {
                origin_id: origin_id.clone(),
                kind: a.site.kind,
                anchors: a.site.anchors.clone(),
                token: a.token.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("plan records serialize"));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a plan dump back against its source corpus, one plan per distinct
/// `origin_id` in first-appearance order.
///
/// Replace targets are recovered from the snippet tokens at the recorded
/// anchors; insert ordinals are reassigned by arrival order per gap, which
/// re-applies to the identical perturbed stream.
pub fn load_plans(
    path: &std::path::Path,
    corpus: &[CodeSnippet],
) -> Result<Vec<(String, PerturbationPlan)>, TransformError> {
    let by_id: HashMap<&str, &CodeSnippet> =
        corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut order: Vec<String> = Vec::new();
    let mut plans: HashMap<String, PerturbationPlan> = HashMap::new();

    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PlanRecord =
            serde_json::from_str(line).map_err(|e| TransformError::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let snippet = by_id
            .get(record.origin_id.as_str())
            .ok_or_else(|| TransformError::UnknownOrigin(record.origin_id.clone()))?;
        if record.anchors.is_empty() {
            return Err(TransformError::MalformedRecord {
                line: i + 1,
                reason: "empty anchor list".to_owned(),
            });
        }
        let plan = plans.entry(record.origin_id.clone()).or_insert_with(|| {
            order.push(record.origin_id.clone());
            PerturbationPlan::empty()
        });
        let site = if record.kind.is_replace() {
            let target = snippet
                .tokens
                .get(record.anchors[0])
                .ok_or_else(|| TransformError::MalformedRecord {
                    line: i + 1,
                    reason: format!("anchor {} out of bounds", record.anchors[0]),
                })?
                .clone();
            PerturbSite {
                kind: record.kind,
                anchors: record.anchors,
                ordinal: 0,
                slot: 0,
                target: Some(target),
            }
        } else {
            let gap = record.anchors[0];
            let ordinal = plan
                .assignments
                .iter()
                .filter(|a| !a.site.kind.is_replace() && a.site.gap() == gap)
                .count();
            PerturbSite {
                kind: record.kind,
                anchors: record.anchors,
                ordinal,
                slot: template_slot(record.kind),
                target: None,
            }
        };
        plan.assignments.push(Assignment {
            site,
            token: record.token,
        });
    }

    Ok(order
        .into_iter()
        .map(|id| {
            let plan = plans.remove(&id).expect("plan recorded for id");
            (id, plan)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CodeSnippet, Vocabulary};
    use crate::demo;

    fn snippet(code: &str) -> CodeSnippet {
        CodeSnippet::from_code("t", code, "f").unwrap()
    }

    fn vocab_with(snippets: &[&CodeSnippet], extras: &[&str]) -> Vocabulary {
        let owned: Vec<CodeSnippet> = snippets.iter().map(|s| (*s).clone()).collect();
        let extras: Vec<String> = extras.iter().map(|s| (*s).to_owned()).collect();
        Vocabulary::build(&owned, &extras)
    }

    #[test]
    fn example_stream_statement_boundaries() {
        let s = demo::example_snippet();
        let gaps = insert_gaps(&s.tokens);
        assert_eq!(gaps, vec![30, 37, 45, 49, 59, 61, 69, 76, 81, 86, 94]);
    }

    #[test]
    fn example_stream_param_sites() {
        let s = demo::example_snippet();
        let sites = extract_sites(&s, usize::MAX);
        let params: Vec<&str> = sites
            .iter()
            .filter(|site| site.kind == SiteKind::RenameParam)
            .map(|site| site.target.as_deref().unwrap())
            .collect();
        for expected in ["application", "name", "notifications", "default", "port"] {
            assert!(params.contains(&expected), "missing param site {expected}");
        }
        // Every field token in this stream echoes a parameter, so the
        // priority classifier leaves no separate field sites.
        assert!(sites.iter().all(|s| s.kind != SiteKind::RenameField));
    }

    #[test]
    fn example_plan_reproduces_perturbed_stream() {
        let s = demo::example_snippet();
        let vocab = demo::example_vocab();
        let plan = demo::example_plan();
        let perturbed = apply_plan(&s, &plan, &vocab).unwrap();
        assert_eq!(perturbed.render_tokens(), demo::EXAMPLE_PERTURBED);
    }

    #[test]
    fn example_perturbed_strips_back() {
        let s = demo::example_snippet();
        let vocab = demo::example_vocab();
        let perturbed = apply_plan(&s, &demo::example_plan(), &vocab).unwrap();
        let restored = strip_perturbations(&perturbed).unwrap();
        assert_eq!(restored, s);
    }

    #[test]
    fn empty_plan_is_identity() {
        let s = demo::example_snippet();
        let vocab = demo::example_vocab();
        let perturbed = apply_plan(&s, &PerturbationPlan::empty(), &vocab).unwrap();
        assert_eq!(perturbed.tokens, s.tokens);
    }

    #[test]
    fn bare_literal_yields_single_bool_site() {
        let s = snippet("true");
        let sites = extract_sites(&s, 8);
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].kind, SiteKind::ReplaceBoolLiteral);
        assert_eq!(sites[0].anchors, vec![0]);
    }

    /// Hand-enumerated micro-streams: expected (kind, target/gap) per stream.
    #[test]
    fn micro_stream_site_enumeration() {
        struct Case {
            code: &'static str,
            replace: &'static [(SiteKind, &'static str)],
            gaps: &'static [usize],
        }
        let cases = [
            Case {
                code: "x = 1",
                replace: &[(SiteKind::RenameLocalVar, "x")],
                gaps: &[3],
            },
            Case {
                code: "x = 1 y = x",
                replace: &[
                    (SiteKind::RenameLocalVar, "x"),
                    (SiteKind::RenameLocalVar, "y"),
                ],
                gaps: &[3, 6],
            },
            Case {
                code: "( self a ) : self . b = a",
                replace: &[(SiteKind::RenameParam, "a"), (SiteKind::RenameField, "b")],
                gaps: &[5, 10],
            },
            Case {
                code: "self . flag = true",
                replace: &[
                    (SiteKind::RenameField, "flag"),
                    (SiteKind::ReplaceBoolLiteral, "true"),
                ],
                gaps: &[5],
            },
            Case {
                code: "if x : y = false",
                replace: &[
                    (SiteKind::RenameLocalVar, "y"),
                    (SiteKind::ReplaceBoolLiteral, "false"),
                ],
                gaps: &[3, 6],
            },
            Case {
                code: "( a = none ) : return a",
                replace: &[(SiteKind::RenameParam, "a")],
                gaps: &[6],
            },
            Case {
                code: "x = foo ( y )",
                replace: &[(SiteKind::RenameLocalVar, "x")],
                gaps: &[6],
            },
            Case {
                code: "a b c",
                replace: &[],
                gaps: &[],
            },
            Case {
                code: "x = true y = false",
                replace: &[
                    (SiteKind::RenameLocalVar, "x"),
                    (SiteKind::RenameLocalVar, "y"),
                    (SiteKind::ReplaceBoolLiteral, "true"),
                    (SiteKind::ReplaceBoolLiteral, "false"),
                ],
                gaps: &[3, 6],
            },
            Case {
                code: "( self opts ) : self . opts = list ( opts )",
                replace: &[(SiteKind::RenameParam, "opts")],
                gaps: &[5, 13],
            },
        ];
        for case in &cases {
            let s = snippet(case.code);
            let sites = extract_sites(&s, usize::MAX);
            let got_replace: Vec<(SiteKind, &str)> = sites
                .iter()
                .filter(|site| site.kind.is_replace())
                .map(|site| (site.kind, site.target.as_deref().unwrap()))
                .collect();
            assert_eq!(got_replace, case.replace, "replace sites for {:?}", case.code);
            assert_eq!(
                insert_gaps(&s.tokens),
                case.gaps,
                "gaps for {:?}",
                case.code
            );
        }
    }

    #[test]
    fn extract_sites_deterministic() {
        let s = demo::example_snippet();
        assert_eq!(extract_sites(&s, 8), extract_sites(&s, 8));
    }

    #[test]
    fn insert_slot_cap_respected() {
        let s = demo::example_snippet();
        let sites = extract_sites(&s, 8);
        let inserts = sites.iter().filter(|s| !s.kind.is_replace()).count();
        assert_eq!(inserts, 8);
        // Alternating dead-code / print within each gap.
        let kinds: Vec<SiteKind> = sites
            .iter()
            .filter(|s| !s.kind.is_replace())
            .map(|s| s.kind)
            .collect();
        assert_eq!(kinds[0], SiteKind::InsertDeadCode);
        assert_eq!(kinds[1], SiteKind::InsertPrint);
    }

    #[test]
    fn reserved_tokens_never_become_sites() {
        let s = demo::example_snippet();
        for site in extract_sites(&s, usize::MAX) {
            if let Some(target) = &site.target {
                if site.kind != SiteKind::ReplaceBoolLiteral {
                    assert!(!is_reserved(target), "reserved target {target}");
                }
            }
        }
    }

    #[test]
    fn rename_capture_rejected() {
        let s = snippet("x = 1 y = x");
        let vocab = vocab_with(&[&s], &["y", "fresh"]);
        let sites = extract_sites(&s, 0);
        let site_x = sites
            .iter()
            .find(|site| site.target.as_deref() == Some("x"))
            .unwrap();
        let capture = PerturbationPlan {
            assignments: vec![Assignment {
                site: site_x.clone(),
                token: "y".into(),
            }],
        };
        assert!(matches!(
            apply_plan(&s, &capture, &vocab),
            Err(TransformError::InvalidAssignment(_))
        ));
        let fresh = PerturbationPlan {
            assignments: vec![Assignment {
                site: site_x.clone(),
                token: "fresh".into(),
            }],
        };
        let perturbed = apply_plan(&s, &fresh, &vocab).unwrap();
        assert_eq!(perturbed.render_tokens(), "fresh = 1 y = fresh");
    }

    #[test]
    fn duplicate_rename_tokens_rejected() {
        let s = snippet("x = 1 y = 2");
        let vocab = vocab_with(&[&s], &["fresh"]);
        let sites = extract_sites(&s, 0);
        let plan = PerturbationPlan {
            assignments: sites
                .iter()
                .filter(|site| site.kind.is_replace())
                .map(|site| Assignment {
                    site: site.clone(),
                    token: "fresh".into(),
                })
                .collect(),
        };
        assert!(matches!(
            validate_plan(&s, &plan, &vocab),
            Err(TransformError::InvalidAssignment(_))
        ));
    }

    #[test]
    fn bool_site_requires_bool_token() {
        let s = snippet("x = true");
        let vocab = vocab_with(&[&s], &["fresh", "false"]);
        let site = extract_sites(&s, 0)
            .into_iter()
            .find(|site| site.kind == SiteKind::ReplaceBoolLiteral)
            .unwrap();
        let bad = PerturbationPlan {
            assignments: vec![Assignment {
                site: site.clone(),
                token: "fresh".into(),
            }],
        };
        assert!(validate_plan(&s, &bad, &vocab).is_err());
        let flip = PerturbationPlan {
            assignments: vec![Assignment {
                site,
                token: "false".into(),
            }],
        };
        let perturbed = apply_plan(&s, &flip, &vocab).unwrap();
        assert_eq!(perturbed.render_tokens(), "x = false");
    }

    #[test]
    fn insert_filler_must_be_identifier() {
        let s = snippet("x = 1");
        let vocab = vocab_with(&[&s], &[]);
        let site = extract_sites(&s, 8)
            .into_iter()
            .find(|site| site.kind == SiteKind::InsertDeadCode)
            .unwrap();
        let bad = PerturbationPlan {
            assignments: vec![Assignment {
                site,
                token: "=".into(),
            }],
        };
        assert!(validate_plan(&s, &bad, &vocab).is_err());
    }

    #[test]
    fn token_outside_vocab_rejected() {
        let s = snippet("x = 1");
        let vocab = vocab_with(&[&s], &[]);
        let site = extract_sites(&s, 8)
            .into_iter()
            .find(|site| site.kind == SiteKind::InsertPrint)
            .unwrap();
        let plan = PerturbationPlan {
            assignments: vec![Assignment {
                site,
                token: "notinvocab".into(),
            }],
        };
        assert!(matches!(
            apply_plan(&s, &plan, &vocab),
            Err(TransformError::TokenNotInVocab(_))
        ));
    }

    #[test]
    fn foreign_site_rejected() {
        let s = snippet("x = 1");
        let vocab = vocab_with(&[&s], &["fresh"]);
        let foreign = PerturbSite::insert(SiteKind::InsertPrint, 1, 0); // gap 1 is no boundary
        let plan = PerturbationPlan {
            assignments: vec![Assignment {
                site: foreign,
                token: "fresh".into(),
            }],
        };
        assert!(matches!(
            apply_plan(&s, &plan, &vocab),
            Err(TransformError::SiteNotFound(_))
        ));
    }

    #[test]
    fn stacked_trailing_insertions_keep_order() {
        let s = snippet("x = 1");
        let vocab = vocab_with(&[&s], &["first", "second"]);
        let sites = extract_sites(&s, usize::MAX);
        let d0 = sites
            .iter()
            .find(|site| site.kind == SiteKind::InsertDeadCode && site.ordinal == 0)
            .unwrap();
        let d1 = sites
            .iter()
            .find(|site| site.kind == SiteKind::InsertDeadCode && site.ordinal == 1)
            .unwrap();
        let plan = PerturbationPlan {
            assignments: vec![
                Assignment {
                    site: d1.clone(),
                    token: "second".into(),
                },
                Assignment {
                    site: d0.clone(),
                    token: "first".into(),
                },
            ],
        };
        let perturbed = apply_plan(&s, &plan, &vocab).unwrap();
        assert_eq!(
            perturbed.render_tokens(),
            "x = 1 if false : first = 1 if false : second = 1"
        );
        assert_eq!(strip_perturbations(&perturbed).unwrap().tokens, s.tokens);
    }

    #[test]
    fn instantiate_zero_sites_is_original() {
        let s = snippet("x = 1");
        let prog = instantiate_slots(&s, &[]).unwrap();
        let tokens: Vec<&str> = prog
            .rows
            .iter()
            .map(|r| match r {
                RowKind::Fixed { token } => token.as_str(),
                other => panic!("unexpected row {other:?}"),
            })
            .collect();
        assert_eq!(tokens, vec!["x", "=", "1"]);
    }

    #[test]
    fn instantiate_marks_print_slot() {
        let s = snippet("x = 1");
        let sites: Vec<PerturbSite> = extract_sites(&s, usize::MAX)
            .into_iter()
            .filter(|site| site.kind == SiteKind::InsertPrint && site.ordinal == 0)
            .collect();
        let prog = instantiate_slots(&s, &sites).unwrap();
        // Augmented stream: x = 1 print ( <slot> )
        assert_eq!(prog.rows.len(), 7);
        assert!(matches!(prog.rows[3], RowKind::InsertFixed { site: 0, ref token } if token == "print"));
        assert!(matches!(prog.rows[5], RowKind::InsertSlot { site: 0 }));
        assert_eq!(prog.slot_positions[0], vec![5]);
    }

    #[test]
    fn slot_positions_match_apply_plan() {
        let s = demo::example_snippet();
        let vocab = demo::example_vocab();
        let sites = extract_sites(&s, usize::MAX);
        let prog = instantiate_slots(&s, &sites).unwrap();
        // Assign a marker to one insert site and check the applied stream has
        // the marker where the slot program put the slot row, once all other
        // insert templates are imagined away.
        let (idx, site) = sites
            .iter()
            .enumerate()
            .find(|(_, site)| site.kind == SiteKind::InsertPrint)
            .unwrap();
        let plan = PerturbationPlan {
            assignments: vec![Assignment {
                site: site.clone(),
                token: "pspace".into(),
            }],
        };
        let perturbed = apply_plan(&s, &plan, &vocab).unwrap();
        let marker_pos = perturbed
            .tokens
            .iter()
            .position(|t| t == "pspace")
            .unwrap();
        // In apply_plan coordinates only this one template is spliced, so the
        // slot sits at gap + template offset.
        assert_eq!(marker_pos, site.gap() + template_slot(site.kind));
        // In the slot program the same site's slot row is recorded explicitly.
        assert!(matches!(
            prog.rows[prog.slot_positions[idx][0]],
            RowKind::InsertSlot { site } if site == idx
        ));
    }

    #[test]
    fn overlapping_replace_sites_rejected() {
        let s = snippet("x = 1");
        let a = PerturbSite::replace(SiteKind::RenameLocalVar, vec![0], "x");
        let b = PerturbSite::replace(SiteKind::RenameParam, vec![0], "x");
        assert!(matches!(
            instantiate_slots(&s, &[a, b]),
            Err(TransformError::OverlappingSites(0))
        ));
    }

    #[test]
    fn plan_records_reapply_to_identical_stream() {
        let s = demo::example_snippet();
        let vocab = demo::example_vocab();
        let plan = demo::example_plan();
        let expected = apply_plan(&s, &plan, &vocab).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.jsonl");
        dump_plans(&path, &[(s.id.clone(), plan)]).unwrap();
        let reloaded = load_plans(&path, std::slice::from_ref(&s)).unwrap();
        assert_eq!(reloaded.len(), 1);
        assert_eq!(reloaded[0].0, s.id);
        let reapplied = apply_plan(&s, &reloaded[0].1, &vocab).unwrap();
        assert_eq!(reapplied.tokens, expected.tokens);
    }

    #[test]
    fn plan_records_canonicalize_stacked_insert_order() {
        // Plan lists the trailing-gap pair out of ordinal order; the dump
        // sorts records so the reload splices identically.
        let s = snippet("x = 1");
        let vocab = vocab_with(&[&s], &["first", "second"]);
        let sites = extract_sites(&s, usize::MAX);
        let d1 = sites
            .iter()
            .find(|site| site.kind == SiteKind::InsertDeadCode && site.ordinal == 1)
            .unwrap();
        let p0 = sites
            .iter()
            .find(|site| site.kind == SiteKind::InsertPrint && site.ordinal == 0)
            .unwrap();
        let plan = PerturbationPlan {
            assignments: vec![
                Assignment {
                    site: d1.clone(),
                    token: "second".to_owned(),
                },
                Assignment {
                    site: p0.clone(),
                    token: "first".to_owned(),
                },
            ],
        };
        let expected = apply_plan(&s, &plan, &vocab).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.jsonl");
        dump_plans(&path, &[(s.id.clone(), plan)]).unwrap();
        let reloaded = load_plans(&path, std::slice::from_ref(&s)).unwrap();
        let reapplied = apply_plan(&s, &reloaded[0].1, &vocab).unwrap();
        assert_eq!(reapplied.tokens, expected.tokens);
    }

    #[test]
    fn plan_records_unknown_origin_rejected() {
        let s = snippet("x = 1");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.jsonl");
        std::fs::write(
            &path,
            "{\"origin_id\":\"ghost\",\"kind\":\"InsertPrint\",\"anchors\":[3],\"token\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_plans(&path, std::slice::from_ref(&s)),
            Err(TransformError::UnknownOrigin(id)) if id == "ghost"
        ));
    }

    #[test]
    fn plan_records_malformed_line_reported() {
        let s = snippet("x = 1");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.jsonl");
        std::fs::write(&path, "\n{not json}\n").unwrap();
        assert!(matches!(
            load_plans(&path, std::slice::from_ref(&s)),
            Err(TransformError::MalformedRecord { line: 2, .. })
        ));
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        /// Builds a random valid plan for `snippet` using fresh fillers that
        /// are guaranteed vocabulary members.
        fn random_plan(
            snippet: &CodeSnippet,
            fillers: &[String],
            seed: u64,
        ) -> PerturbationPlan {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sites = extract_sites(snippet, usize::MAX);
            let mut chosen: Vec<PerturbSite> = sites
                .choose_multiple(&mut rng, sites.len().min(4))
                .cloned()
                .collect();
            chosen.sort_by_key(|s| (s.kind, s.anchors.clone(), s.ordinal));
            let mut used_gaps = HashSet::new();
            let mut filler_iter = fillers.iter();
            let mut assignments = Vec::new();
            for site in chosen {
                let token = match site.kind {
                    SiteKind::ReplaceBoolLiteral => {
                        if rng.gen_bool(0.5) { "true" } else { "false" }.to_owned()
                    }
                    _ => match filler_iter.next() {
                        Some(f) => f.clone(),
                        None => break,
                    },
                };
                if !site.kind.is_replace() && !used_gaps.insert((site.gap(), site.ordinal)) {
                    continue;
                }
                assignments.push(Assignment { site, token });
            }
            PerturbationPlan { assignments }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // strip ∘ apply = identity over synthetic snippets and plans.
            #[test]
            fn prop_round_trip(seed in 0u64..500) {
                let corpus = corpus::synthesize_corpus(8, 6, seed);
                let fillers: Vec<String> = (0..6).map(|i| format!("zz_fresh_{i}")).collect();
                let mut extras = fillers.clone();
                extras.extend(["true".to_owned(), "false".to_owned()]);
                let vocab = Vocabulary::build(&corpus, &extras);
                for s in &corpus {
                    let plan = random_plan(s, &fillers, seed ^ 0xabcd);
                    let perturbed = apply_plan(s, &plan, &vocab).unwrap();
                    let restored = strip_perturbations(&perturbed).unwrap();
                    prop_assert_eq!(&restored, s);
                }
            }

            // Output length arithmetic: 6 per dead-code, 4 per print.
            #[test]
            fn prop_length_arithmetic(seed in 0u64..500) {
                let corpus = corpus::synthesize_corpus(4, 4, seed);
                let fillers: Vec<String> = (0..6).map(|i| format!("zz_fresh_{i}")).collect();
                let mut extras = fillers.clone();
                extras.extend(["true".to_owned(), "false".to_owned()]);
                let vocab = Vocabulary::build(&corpus, &extras);
                for s in &corpus {
                    let plan = random_plan(s, &fillers, seed ^ 0x1234);
                    let perturbed = apply_plan(s, &plan, &vocab).unwrap();
                    let deadcode = plan.assignments.iter()
                        .filter(|a| a.site.kind == SiteKind::InsertDeadCode).count();
                    let print = plan.assignments.iter()
                        .filter(|a| a.site.kind == SiteKind::InsertPrint).count();
                    prop_assert_eq!(
                        perturbed.tokens.len(),
                        s.tokens.len() + 6 * deadcode + 4 * print
                    );
                }
            }

            // No transformation deletes or reorders original tokens: the
            // original stream is a subsequence of the perturbed stream once
            // renames are undone positionally.
            #[test]
            fn prop_extract_deterministic(seed in 0u64..200) {
                let corpus = corpus::synthesize_corpus(3, 3, seed);
                for s in &corpus {
                    prop_assert_eq!(extract_sites(s, 8), extract_sites(s, 8));
                }
            }
        }
    }
}
