//! Chat prompt construction.
//!
//! Every prompt the toolkit sends to a chat model is assembled here as a
//! byte-exact template over a rendered token stream and a candidate-name
//! dictionary: the baseline dictionary prompt, its abstain and confidence
//! variants, the few-shot defense, the inverse-transformation defense in
//! single- and two-step form, and the two meta-prompting requests that ask a
//! model to author a defensive prompt itself.
//!
//! Builders are pure functions: equal inputs produce byte-identical prompts.
//! Structural invariants — at most one `System` message and only in first
//! position, a final `User` message, no empty message bodies — are enforced
//! by [`ChatPrompt::new`], the only constructor.
//!
//! The reference instruction texts ([`SYSTEM_TEMPLATE`],
//! [`CONFIDENCE_TEMPLATE`], [`INVD_MANUAL_INSTRUCTION`], the two stored
//! generated prompts) are frozen byte-for-byte; golden-file tests guard them
//! against drift. The meta-prompting *request* wording
//! ([`EBMP_REQUEST_HEADER`], [`EBMP_REQUEST_FOOTER`], [`PAMP_REQUEST`]) and
//! the abstain sentence are this library's own phrasing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dictionary;

/// Errors from prompt construction.
#[derive(Debug, Error)]
pub enum PromptError {
    /// The dictionary has no candidate names.
    #[error("dictionary has no labels")]
    EmptyDictionary,
    /// The code under query is empty.
    #[error("query code must be non-empty")]
    EmptyQuery,
    /// A few-shot pair has an empty code or label side.
    #[error("few-shot pair has an empty code or label")]
    EmptyFewShot,
    /// The few-shot defense was invoked without adversarial pairs.
    #[error("few-shot defense requires at least one adversarial pair")]
    NoAdversarialPairs,
    /// An explicit inverse-transformation instruction was empty.
    #[error("instruction must be non-empty")]
    EmptyInstruction,
    /// The example-based meta-prompt request was given no example pairs.
    #[error("meta-prompt request requires at least one example pair")]
    NoExamplePairs,
    /// A meta-prompt example side was empty.
    #[error("meta-prompt example code must be non-empty")]
    EmptyExample,
    /// A prompt was constructed with no messages.
    #[error("chat prompt must contain at least one message")]
    EmptyPrompt,
    /// A message had empty content.
    #[error("message content must be non-empty")]
    EmptyContent,
    /// A system message appeared anywhere but first.
    #[error("system message allowed only in first position")]
    MisplacedSystem,
    /// The last message was not a user message.
    #[error("final message must have the user role")]
    FinalNotUser,
}

/// Chat message author role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Conversation-level instruction.
    System,
    /// The querying side.
    User,
    /// The model side.
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

/// One message of a chat conversation.
///
/// Content must be non-empty; the invariant is enforced when the message
/// enters a [`ChatPrompt`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    /// Author role.
    pub role: Role,
    /// Message text.
    pub content: String,
}

impl ChatMessage {
    /// A system message.
    #[must_use]
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    /// A user message.
    #[must_use]
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    /// An assistant message.
    #[must_use]
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// An ordered chat conversation ready to send.
///
/// Invariants, enforced at construction: at least one message, every content
/// non-empty, at most one `System` message and only in first position, and a
/// final `User` message. Serializes as a bare array of messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChatMessage>", into = "Vec<ChatMessage>")]
pub struct ChatPrompt {
    messages: Vec<ChatMessage>,
}

impl ChatPrompt {
    /// Validates the structural invariants and wraps the messages.
    ///
    /// # Errors
    ///
    /// [`PromptError::EmptyPrompt`], [`PromptError::EmptyContent`],
    /// [`PromptError::MisplacedSystem`], or [`PromptError::FinalNotUser`]
    /// when the corresponding invariant fails.
    pub fn new(messages: Vec<ChatMessage>) -> Result<Self, PromptError> {
        if messages.is_empty() {
            return Err(PromptError::EmptyPrompt);
        }
        for (i, message) in messages.iter().enumerate() {
            if message.content.is_empty() {
                return Err(PromptError::EmptyContent);
            }
            if message.role == Role::System && i != 0 {
                return Err(PromptError::MisplacedSystem);
            }
        }
        if messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(PromptError::FinalNotUser);
        }
        Ok(ChatPrompt { messages })
    }

    /// The messages in order.
    #[must_use]
    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    /// Content of the final message (always a user message).
    #[must_use]
    pub fn final_user(&self) -> &str {
        &self
            .messages
            .last()
            .expect("prompt is never empty")
            .content
    }

    /// Plain-text transcript: one `[role]` header plus content per message,
    /// blocks separated by a blank line.
    #[must_use]
    pub fn render_transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("[{}]\n{}", m.role, m.content))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

impl TryFrom<Vec<ChatMessage>> for ChatPrompt {
    type Error = PromptError;

    fn try_from(messages: Vec<ChatMessage>) -> Result<Self, Self::Error> {
        ChatPrompt::new(messages)
    }
}

impl From<ChatPrompt> for Vec<ChatMessage> {
    fn from(prompt: ChatPrompt) -> Self {
        prompt.messages
    }
}

/// One in-context demonstration: a rendered token stream and its label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPair {
    /// Rendered (space-joined) token stream.
    pub code: String,
    /// Ground-truth function name.
    pub label: String,
}

impl FewShotPair {
    /// Convenience constructor.
    #[must_use]
    pub fn new(code: impl Into<String>, label: impl Into<String>) -> Self {
        FewShotPair {
            code: code.into(),
            label: label.into(),
        }
    }
}

/// The closed set of prompt variants the harness evaluates.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptVariant {
    /// Dictionary prompt with few-shot pairs.
    #[serde(rename = "baseline")]
    Baseline,
    /// Baseline plus permission to answer `I don't know`.
    #[serde(rename = "abstain")]
    Abstain,
    /// Single-message prompt requesting `word (confidence)`.
    #[serde(rename = "confidence")]
    Confidence,
    /// Few-shot defense: baseline plus adversarial demonstrations.
    #[serde(rename = "fsd")]
    Fsd,
    /// Single-step inverse-transformation defense, manual instruction.
    #[serde(rename = "invd")]
    InvD,
    /// First step of the two-step defense (code recovery).
    #[serde(rename = "invd-step1")]
    InvDStep1,
    /// Second step of the two-step defense (classify recovered code).
    #[serde(rename = "invd-step2")]
    InvDStep2,
    /// Single-step defense with a model-generated instruction (non-empty).
    #[serde(rename = "invd-generated")]
    InvDGenerated(String),
}

impl PromptVariant {
    /// Stable machine-readable name (drops any generated-instruction text).
    #[must_use]
    pub fn name(&self) -> &'static str {
        match self {
            PromptVariant::Baseline => "baseline",
            PromptVariant::Abstain => "abstain",
            PromptVariant::Confidence => "confidence",
            PromptVariant::Fsd => "fsd",
            PromptVariant::InvD => "invd",
            PromptVariant::InvDStep1 => "invd-step1",
            PromptVariant::InvDStep2 => "invd-step2",
            PromptVariant::InvDGenerated(_) => "invd-generated",
        }
    }

    /// Checks the non-empty-text invariant of
    /// [`PromptVariant::InvDGenerated`].
    ///
    /// # Errors
    ///
    /// [`PromptError::EmptyInstruction`] when the generated text is empty.
    pub fn validate(&self) -> Result<(), PromptError> {
        match self {
            PromptVariant::InvDGenerated(text) if text.is_empty() => {
                Err(PromptError::EmptyInstruction)
            }
            _ => Ok(()),
        }
    }

    /// The generated-instruction variant preloaded with the stored
    /// example-based meta-prompting output.
    #[must_use]
    pub fn ebmp_default() -> Self {
        PromptVariant::InvDGenerated(EBMP_GENERATED_PROMPT.to_owned())
    }

    /// The generated-instruction variant preloaded with the stored
    /// perturbation-aware meta-prompting output.
    #[must_use]
    pub fn pamp_default() -> Self {
        PromptVariant::InvDGenerated(PAMP_GENERATED_PROMPT.to_owned())
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// System instruction of the dictionary prompt. `{dictionary}` is replaced
/// by the comma-space-joined candidate names.
pub const SYSTEM_TEMPLATE: &str = "act as a code summarization model that only outputs one word; the possible output should be one of the following dictionary: {dictionary}";

/// Sentence appended to the query in the abstain variant (our phrasing; the
/// literal `I don't know` reply it licenses is the fixed part).
pub const ABSTAIN_SENTENCE: &str = "If you are not sure about the answer, output \"I don't know\".";

/// The abstain reply the parser recognizes.
pub const ABSTAIN_REPLY: &str = "I don't know";

/// Single-message confidence-elicitation template. `{dictionary}` and
/// `{code}` are replaced.
pub const CONFIDENCE_TEMPLATE: &str = "Use one word from the set {dictionary} to describe the following piece of code: {code}. Also, output your confidence in your choice as a probability between 0 and 1. Don't provide any other description. The reply form should be \"word (confidence).\"";

/// Manual instruction of the inverse-transformation defense.
pub const INVD_MANUAL_INSTRUCTION: &str = "Remove the if false statement and the print statement in the code before the summarization.";

/// Wrapper applied to a generated instruction in the single-step defense.
/// `{instruction}` is replaced verbatim; the trailing period is part of the
/// wrapper, so an instruction that already ends in one yields a double
/// period.
pub const INVD_WRAPPER_TEMPLATE: &str = "Before summarization, {instruction}.";

/// Step-1 template of the two-step defense. `{instruction}` and `{code}` are
/// replaced; the separator is a newline, a space, and the `code:` marker.
pub const INVD_STEP1_TEMPLATE: &str = "{instruction}\n code: {code}";

/// Opening line of the example-based meta-prompting request (our phrasing;
/// deliberately silent about what the perturbations are).
pub const EBMP_REQUEST_HEADER: &str = "Below are pairs of code snippets; in each pair the first snippet is the original and the second is a perturbed copy of it.";

/// Closing instruction of the example-based meta-prompting request (our
/// phrasing).
pub const EBMP_REQUEST_FOOTER: &str = "Study the pairs and write one reusable prompt that instructs a model to convert a perturbed code snippet back to its original form. Reply with the prompt text only.";

/// The perturbation-aware meta-prompting request (our phrasing): names all
/// six transformation kinds and asks for a restoration prompt.
pub const PAMP_REQUEST: &str = "A code snippet has been adversarially perturbed. The possible perturbations are: renaming local variables, renaming parameters, renaming fields, replacing boolean literals, inserting print statements, and inserting dead code. Write one reusable prompt that instructs a model to restore such perturbed code to its original form. Reply with the prompt text only.";

/// Stored output of example-based meta-prompting, shipped as the default
/// generated instruction.
pub const EBMP_GENERATED_PROMPT: &str = "Given a perturbed version of a code snippet, your task is to convert it back to its original, clean, and functional form by removing any extraneous and unnecessary lines or elements. Make sure the output is syntactically correct and maintains the original logic and structure of the code.";

/// Stored output of perturbation-aware meta-prompting, shipped as the
/// default generated instruction.
pub const PAMP_GENERATED_PROMPT: &str = "Restore the perturbed code to its original form. Remove added print statements, eliminate dead code, correct replaced literals, and restore renamed variables, parameters, and fields to their original names. Ensure the output is syntactically correct and retains the original logic.";

/// Substitutes placeholders in a single left-to-right pass over `template`.
/// Substituted values are never rescanned, so placeholder-shaped text inside
/// a value cannot trigger a second substitution.
fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while !rest.is_empty() {
        for (key, value) in substitutions {
            if let Some(after) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        let mut chars = rest.chars();
        out.push(chars.next().expect("rest is non-empty"));
        rest = chars.as_str();
    }
    out
}

/// Renders the system message for `dictionary`.
fn system_message(dictionary: &Dictionary) -> ChatMessage {
    ChatMessage::system(fill(
        SYSTEM_TEMPLATE,
        &[("{dictionary}", &dictionary.render())],
    ))
}

/// Appends one user/assistant message pair per few-shot example.
fn push_pairs(
    messages: &mut Vec<ChatMessage>,
    pairs: &[FewShotPair],
) -> Result<(), PromptError> {
    for pair in pairs {
        if pair.code.is_empty() || pair.label.is_empty() {
            return Err(PromptError::EmptyFewShot);
        }
        messages.push(ChatMessage::user(pair.code.clone()));
        messages.push(ChatMessage::assistant(pair.label.clone()));
    }
    Ok(())
}

/// System message, few-shot pairs, then a final user message.
fn skeleton(
    dictionary: &Dictionary,
    fewshot: &[FewShotPair],
    final_user: String,
) -> Result<ChatPrompt, PromptError> {
    if dictionary.labels.is_empty() {
        return Err(PromptError::EmptyDictionary);
    }
    let mut messages = Vec::with_capacity(2 + 2 * fewshot.len());
    messages.push(system_message(dictionary));
    push_pairs(&mut messages, fewshot)?;
    messages.push(ChatMessage::user(final_user));
    ChatPrompt::new(messages)
}

/// Builds the baseline dictionary prompt: the system instruction over
/// `dictionary`, one user/assistant pair per few-shot example, and the query
/// code as the final user message.
///
/// # Errors
///
/// [`PromptError::EmptyDictionary`], [`PromptError::EmptyQuery`], or
/// [`PromptError::EmptyFewShot`].
pub fn build_baseline(
    dictionary: &Dictionary,
    fewshot: &[FewShotPair],
    query_code: &str,
) -> Result<ChatPrompt, PromptError> {
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    skeleton(dictionary, fewshot, query_code.to_owned())
}

/// Builds the abstain variant: identical to [`build_baseline`] except the
/// final user message carries [`ABSTAIN_SENTENCE`] on a new line after the
/// query code.
///
/// # Errors
///
/// As [`build_baseline`].
pub fn build_abstain(
    dictionary: &Dictionary,
    fewshot: &[FewShotPair],
    query_code: &str,
) -> Result<ChatPrompt, PromptError> {
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    skeleton(
        dictionary,
        fewshot,
        format!("{query_code}\n{ABSTAIN_SENTENCE}"),
    )
}

/// Builds the confidence-elicitation prompt: a single user message per
/// [`CONFIDENCE_TEMPLATE`], no system message and no few-shot pairs.
///
/// # Errors
///
/// [`PromptError::EmptyDictionary`] or [`PromptError::EmptyQuery`].
pub fn build_confidence(
    dictionary: &Dictionary,
    query_code: &str,
) -> Result<ChatPrompt, PromptError> {
    if dictionary.labels.is_empty() {
        return Err(PromptError::EmptyDictionary);
    }
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let content = fill(
        CONFIDENCE_TEMPLATE,
        &[
            ("{dictionary}", &dictionary.render()),
            ("{code}", query_code),
        ],
    );
    ChatPrompt::new(vec![ChatMessage::user(content)])
}

/// Builds the few-shot defense prompt: the baseline structure with the
/// adversarial demonstrations (perturbed code, correct label) appended after
/// the clean pairs.
///
/// # Errors
///
/// [`PromptError::NoAdversarialPairs`] when `adv_pairs` is empty, otherwise
/// as [`build_baseline`].
pub fn build_fsd(
    dictionary: &Dictionary,
    clean_pairs: &[FewShotPair],
    adv_pairs: &[FewShotPair],
    query_code: &str,
) -> Result<ChatPrompt, PromptError> {
    if adv_pairs.is_empty() {
        return Err(PromptError::NoAdversarialPairs);
    }
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    if dictionary.labels.is_empty() {
        return Err(PromptError::EmptyDictionary);
    }
    let mut messages = Vec::with_capacity(2 + 2 * (clean_pairs.len() + adv_pairs.len()));
    messages.push(system_message(dictionary));
    push_pairs(&mut messages, clean_pairs)?;
    push_pairs(&mut messages, adv_pairs)?;
    messages.push(ChatMessage::user(query_code.to_owned()));
    ChatPrompt::new(messages)
}

/// Builds the single-step inverse-transformation defense prompt: the
/// baseline structure with the final user message prefixed by an
/// instruction line.
///
/// With `instruction` absent the prefix is [`INVD_MANUAL_INSTRUCTION`]; with
/// an explicit instruction it is [`INVD_WRAPPER_TEMPLATE`] over that text —
/// except that passing the manual instruction explicitly is identical to
/// passing none.
///
/// # Errors
///
/// [`PromptError::EmptyInstruction`] for `Some("")`, otherwise as
/// [`build_baseline`].
pub fn build_invd(
    dictionary: &Dictionary,
    fewshot: &[FewShotPair],
    query_code: &str,
    instruction: Option<&str>,
) -> Result<ChatPrompt, PromptError> {
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let prefix = match instruction {
        None => INVD_MANUAL_INSTRUCTION.to_owned(),
        Some(text) if text == INVD_MANUAL_INSTRUCTION => INVD_MANUAL_INSTRUCTION.to_owned(),
        Some("") => return Err(PromptError::EmptyInstruction),
        Some(text) => fill(INVD_WRAPPER_TEMPLATE, &[("{instruction}", text)]),
    };
    skeleton(dictionary, fewshot, format!("{prefix}\n{query_code}"))
}

/// The step-2 continuation of the two-step defense: a plain function from
/// (dictionary, few-shot pairs, model-recovered code) to the classification
/// prompt. It is exactly [`build_baseline`].
pub type Step2Builder =
    fn(&Dictionary, &[FewShotPair], &str) -> Result<ChatPrompt, PromptError>;

/// Builds the two-step inverse-transformation defense: a single-user-message
/// recovery prompt per [`INVD_STEP1_TEMPLATE`], plus the builder for the
/// follow-up classification prompt over whatever code the model returns.
///
/// # Errors
///
/// [`PromptError::EmptyQuery`].
pub fn build_invd_two_step(
    query_code: &str,
) -> Result<(ChatPrompt, Step2Builder), PromptError> {
    if query_code.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let content = fill(
        INVD_STEP1_TEMPLATE,
        &[
            ("{instruction}", INVD_MANUAL_INSTRUCTION),
            ("{code}", query_code),
        ],
    );
    let step1 = ChatPrompt::new(vec![ChatMessage::user(content)])?;
    Ok((step1, build_baseline as Step2Builder))
}

/// Builds the example-based meta-prompting request: a single user message
/// presenting each (original, perturbed) pair under `Original:`/`Perturbed:`
/// headers, then [`EBMP_REQUEST_FOOTER`]. The request wording never
/// describes the perturbation kinds — the model must deduce them from the
/// examples.
///
/// # Errors
///
/// [`PromptError::NoExamplePairs`] or [`PromptError::EmptyExample`].
pub fn build_meta_ebmp(pairs: &[(String, String)]) -> Result<ChatPrompt, PromptError> {
    if pairs.is_empty() {
        return Err(PromptError::NoExamplePairs);
    }
    let mut content = String::from(EBMP_REQUEST_HEADER);
    for (original, perturbed) in pairs {
        if original.is_empty() || perturbed.is_empty() {
            return Err(PromptError::EmptyExample);
        }
        content.push_str("\n\nOriginal:\n");
        content.push_str(original);
        content.push_str("\n\nPerturbed:\n");
        content.push_str(perturbed);
    }
    content.push_str("\n\n");
    content.push_str(EBMP_REQUEST_FOOTER);
    ChatPrompt::new(vec![ChatMessage::user(content)])
}

/// Builds the perturbation-aware meta-prompting request: a single user
/// message, [`PAMP_REQUEST`], naming all six transformation kinds.
#[must_use]
pub fn build_meta_pamp() -> ChatPrompt {
    ChatPrompt::new(vec![ChatMessage::user(PAMP_REQUEST)])
        .expect("static request is a valid prompt")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(labels: &[&str]) -> Dictionary {
        Dictionary {
            labels: labels.iter().map(|s| (*s).to_owned()).collect(),
            true_label_index: 0,
            truncated: false,
        }
    }

    fn pairs(n: usize) -> Vec<FewShotPair> {
        (0..n)
            .map(|i| FewShotPair::new(format!("x = {i}"), format!("label{i}")))
            .collect()
    }

    #[test]
    fn system_instruction_bytes_are_frozen() {
        assert_eq!(
            SYSTEM_TEMPLATE,
            "act as a code summarization model that only outputs one word; the \
             possible output should be one of the following dictionary: {dictionary}"
        );
    }

    #[test]
    fn manual_instruction_bytes_are_frozen() {
        assert_eq!(
            INVD_MANUAL_INSTRUCTION,
            "Remove the if false statement and the print statement in the code \
             before the summarization."
        );
    }

    #[test]
    fn stored_generated_prompt_bytes_are_frozen() {
        assert_eq!(
            EBMP_GENERATED_PROMPT,
            "Given a perturbed version of a code snippet, your task is to convert \
             it back to its original, clean, and functional form by removing any \
             extraneous and unnecessary lines or elements. Make sure the output is \
             syntactically correct and maintains the original logic and structure \
             of the code."
        );
        assert_eq!(
            PAMP_GENERATED_PROMPT,
            "Restore the perturbed code to its original form. Remove added print \
             statements, eliminate dead code, correct replaced literals, and \
             restore renamed variables, parameters, and fields to their original \
             names. Ensure the output is syntactically correct and retains the \
             original logic."
        );
    }

    #[test]
    fn baseline_zero_fewshot_is_system_plus_user() {
        let d = dict(&["check_state", "get_value", "set_name"]);
        let p = build_baseline(&d, &[], "x = 1").unwrap();
        assert_eq!(p.messages().len(), 2);
        assert_eq!(p.messages()[0].role, Role::System);
        assert_eq!(
            p.messages()[0].content,
            "act as a code summarization model that only outputs one word; the \
             possible output should be one of the following dictionary: \
             check_state, get_value, set_name"
        );
        assert_eq!(p.messages()[1].role, Role::User);
        assert_eq!(p.messages()[1].content, "x = 1");
    }

    #[test]
    fn baseline_fewshot_alternates_user_assistant() {
        let d = dict(&["a", "b"]);
        let fs = pairs(2);
        let p = build_baseline(&d, &fs, "x = 1").unwrap();
        let roles: Vec<Role> = p.messages().iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            vec![
                Role::System,
                Role::User,
                Role::Assistant,
                Role::User,
                Role::Assistant,
                Role::User
            ]
        );
        assert_eq!(p.messages()[1].content, "x = 0");
        assert_eq!(p.messages()[2].content, "label0");
        assert_eq!(p.final_user(), "x = 1");
    }

    #[test]
    fn baseline_renders_dictionary_in_given_order() {
        let d = dict(&["zz", "aa", "mm"]);
        let p = build_baseline(&d, &[], "x = 1").unwrap();
        assert!(p.messages()[0].content.ends_with("dictionary: zz, aa, mm"));
    }

    #[test]
    fn baseline_rejects_degenerate_inputs() {
        let d = dict(&["a"]);
        assert!(matches!(
            build_baseline(&dict(&[]), &[], "x"),
            Err(PromptError::EmptyDictionary)
        ));
        assert!(matches!(
            build_baseline(&d, &[], ""),
            Err(PromptError::EmptyQuery)
        ));
        let bad = vec![FewShotPair::new("code", "")];
        assert!(matches!(
            build_baseline(&d, &bad, "x"),
            Err(PromptError::EmptyFewShot)
        ));
    }

    #[test]
    fn abstain_differs_from_baseline_only_in_final_message() {
        let d = dict(&["a", "b"]);
        let fs = pairs(2);
        let base = build_baseline(&d, &fs, "x = 1").unwrap();
        let abst = build_abstain(&d, &fs, "x = 1").unwrap();
        assert_eq!(base.messages().len(), abst.messages().len());
        let n = base.messages().len();
        assert_eq!(base.messages()[..n - 1], abst.messages()[..n - 1]);
        assert_eq!(
            abst.final_user(),
            "x = 1\nIf you are not sure about the answer, output \"I don't know\"."
        );
        assert!(abst.final_user().contains("I don't know"));
    }

    #[test]
    fn confidence_is_a_single_user_message() {
        let d = dict(&["check_state", "get_value"]);
        let p = build_confidence(&d, "x = 1").unwrap();
        assert_eq!(p.messages().len(), 1);
        assert_eq!(p.messages()[0].role, Role::User);
        assert_eq!(
            p.messages()[0].content,
            "Use one word from the set check_state, get_value to describe the \
             following piece of code: x = 1. Also, output your confidence in your \
             choice as a probability between 0 and 1. Don't provide any other \
             description. The reply form should be \"word (confidence).\""
        );
        assert!(p.messages()[0].content.contains("(confidence)"));
    }

    #[test]
    fn confidence_renders_singleton_dictionary() {
        let d = dict(&["check_state"]);
        let p = build_confidence(&d, "x = 1").unwrap();
        assert!(p.messages()[0]
            .content
            .starts_with("Use one word from the set check_state to describe"));
    }

    #[test]
    fn confidence_never_rescans_substituted_text() {
        let d = dict(&["{code}", "a"]);
        let p = build_confidence(&d, "x = 1").unwrap();
        assert!(p.messages()[0].content.contains("set {code}, a to describe"));
    }

    #[test]
    fn fsd_requires_adversarial_pairs() {
        let d = dict(&["a"]);
        assert!(matches!(
            build_fsd(&d, &pairs(2), &[], "x"),
            Err(PromptError::NoAdversarialPairs)
        ));
    }

    #[test]
    fn fsd_counts_and_orders_pairs() {
        let d = dict(&["a", "b"]);
        let clean = pairs(2);
        let adv = vec![
            FewShotPair::new("x = 1 if false : t = 1", "adv0"),
            FewShotPair::new("x = 2 print ( q )", "adv1"),
            FewShotPair::new("x = 3 if false : u = 1", "adv2"),
        ];
        let p = build_fsd(&d, &clean, &adv, "query").unwrap();
        assert_eq!(p.messages().len(), 2 + 2 * (clean.len() + adv.len()));
        assert_eq!(p.messages()[1].content, "x = 0");
        assert_eq!(p.messages()[3].content, "x = 1");
        assert_eq!(p.messages()[5].content, "x = 1 if false : t = 1");
        assert_eq!(p.messages()[7].content, "x = 2 print ( q )");
        assert_eq!(p.messages()[9].content, "x = 3 if false : u = 1");
        assert_eq!(p.final_user(), "query");
    }

    #[test]
    fn fsd_adversarial_demonstration_carries_dead_code() {
        let d = dict(&["__init__", "check_state"]);
        let adv = vec![FewShotPair::new(crate::demo::EXAMPLE_PERTURBED, "__init__")];
        let p = build_fsd(&d, &[], &adv, "x = 1").unwrap();
        assert!(p.messages()[1].content.contains("if false :"));
        assert!(p.messages()[1].content.contains("print ("));
    }

    #[test]
    fn invd_default_prefixes_manual_instruction() {
        let d = dict(&["a"]);
        let p = build_invd(&d, &[], "x = 1", None).unwrap();
        assert_eq!(
            p.final_user(),
            "Remove the if false statement and the print statement in the code \
             before the summarization.\nx = 1"
        );
    }

    #[test]
    fn invd_explicit_manual_instruction_equals_default() {
        let d = dict(&["a", "b"]);
        let fs = pairs(1);
        let default = build_invd(&d, &fs, "x = 1", None).unwrap();
        let explicit = build_invd(&d, &fs, "x = 1", Some(INVD_MANUAL_INSTRUCTION)).unwrap();
        assert_eq!(default, explicit);
    }

    #[test]
    fn invd_wraps_generated_instruction() {
        let d = dict(&["a"]);
        let p = build_invd(&d, &[], "x = 1", Some("Restore the code")).unwrap();
        assert_eq!(
            p.final_user(),
            "Before summarization, Restore the code.\nx = 1"
        );
    }

    #[test]
    fn invd_wrapper_keeps_instruction_final_period() {
        let d = dict(&["a"]);
        let p = build_invd(&d, &[], "x = 1", Some(EBMP_GENERATED_PROMPT)).unwrap();
        assert!(p.final_user().starts_with(
            "Before summarization, Given a perturbed version of a code snippet,"
        ));
        assert!(p
            .final_user()
            .contains("original logic and structure of the code..\n"));
    }

    #[test]
    fn invd_rejects_empty_instruction() {
        let d = dict(&["a"]);
        assert!(matches!(
            build_invd(&d, &[], "x", Some("")),
            Err(PromptError::EmptyInstruction)
        ));
    }

    #[test]
    fn two_step_step1_matches_template() {
        let (step1, _) = build_invd_two_step("x = 1").unwrap();
        assert_eq!(step1.messages().len(), 1);
        assert_eq!(step1.messages()[0].role, Role::User);
        assert_eq!(
            step1.messages()[0].content,
            "Remove the if false statement and the print statement in the code \
             before the summarization.\n code: x = 1"
        );
    }

    #[test]
    fn two_step_step2_is_the_baseline_builder() {
        let d = dict(&["a", "b"]);
        let fs = pairs(2);
        let (_, step2) = build_invd_two_step("anything").unwrap();
        let via_step2 = step2(&d, &fs, "recovered = 1").unwrap();
        let via_baseline = build_baseline(&d, &fs, "recovered = 1").unwrap();
        assert_eq!(via_step2, via_baseline);
    }

    #[test]
    fn ebmp_one_pair_renders_one_block() {
        let pairs = vec![("x = 1".to_owned(), "x = 1 extra".to_owned())];
        let p = build_meta_ebmp(&pairs).unwrap();
        assert_eq!(p.messages().len(), 1);
        let content = &p.messages()[0].content;
        assert_eq!(content.matches("Original:").count(), 1);
        assert_eq!(content.matches("Perturbed:").count(), 1);
        assert!(content.starts_with(EBMP_REQUEST_HEADER));
        assert!(content.ends_with(EBMP_REQUEST_FOOTER));
    }

    #[test]
    fn ebmp_two_pairs_render_two_blocks() {
        let pairs = vec![
            ("a = 1".to_owned(), "a = 2".to_owned()),
            ("b = 1".to_owned(), "b = 2".to_owned()),
        ];
        let p = build_meta_ebmp(&pairs).unwrap();
        let content = &p.messages()[0].content;
        assert_eq!(content.matches("Original:").count(), 2);
        assert_eq!(content.matches("Perturbed:").count(), 2);
    }

    #[test]
    fn ebmp_request_wording_never_names_perturbation_kinds() {
        for text in [EBMP_REQUEST_HEADER, EBMP_REQUEST_FOOTER] {
            let lower = text.to_lowercase();
            for kind_word in [
                "print",
                "dead code",
                "rename",
                "boolean",
                "literal",
                "variable",
                "parameter",
                "field",
                "if false",
                "insert",
            ] {
                assert!(
                    !lower.contains(kind_word),
                    "request text leaks perturbation knowledge: {kind_word:?}"
                );
            }
        }
    }

    #[test]
    fn ebmp_rejects_degenerate_examples() {
        assert!(matches!(
            build_meta_ebmp(&[]),
            Err(PromptError::NoExamplePairs)
        ));
        let half_empty = vec![("x".to_owned(), String::new())];
        assert!(matches!(
            build_meta_ebmp(&half_empty),
            Err(PromptError::EmptyExample)
        ));
    }

    #[test]
    fn pamp_enumerates_all_six_kinds() {
        let p = build_meta_pamp();
        assert_eq!(p.messages().len(), 1);
        let content = &p.messages()[0].content;
        for phrase in [
            "renaming local variables",
            "renaming parameters",
            "renaming fields",
            "replacing boolean literals",
            "inserting print statements",
            "inserting dead code",
        ] {
            assert!(content.contains(phrase), "missing kind: {phrase:?}");
        }
        assert!(content.contains("print statements"));
        assert!(content.contains("dead code"));
    }

    #[test]
    fn chat_prompt_enforces_structure() {
        assert!(matches!(
            ChatPrompt::new(vec![]),
            Err(PromptError::EmptyPrompt)
        ));
        assert!(matches!(
            ChatPrompt::new(vec![ChatMessage::user("")]),
            Err(PromptError::EmptyContent)
        ));
        assert!(matches!(
            ChatPrompt::new(vec![ChatMessage::user("a"), ChatMessage::system("s")]),
            Err(PromptError::MisplacedSystem)
        ));
        assert!(matches!(
            ChatPrompt::new(vec![
                ChatMessage::system("a"),
                ChatMessage::system("b"),
                ChatMessage::user("c"),
            ]),
            Err(PromptError::MisplacedSystem)
        ));
        assert!(matches!(
            ChatPrompt::new(vec![ChatMessage::system("s"), ChatMessage::assistant("a")]),
            Err(PromptError::FinalNotUser)
        ));
        assert!(ChatPrompt::new(vec![ChatMessage::user("q")]).is_ok());
    }

    #[test]
    fn chat_prompt_serializes_as_message_array() {
        let p = ChatPrompt::new(vec![ChatMessage::system("s"), ChatMessage::user("u")]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"[{"role":"system","content":"s"},{"role":"user","content":"u"}]"#
        );
        let back: ChatPrompt = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let invalid = r#"[{"role":"assistant","content":"a"}]"#;
        assert!(serde_json::from_str::<ChatPrompt>(invalid).is_err());
    }

    #[test]
    fn prompt_variant_names_and_serde() {
        let cases: Vec<(PromptVariant, &str)> = vec![
            (PromptVariant::Baseline, r#""baseline""#),
            (PromptVariant::Abstain, r#""abstain""#),
            (PromptVariant::Confidence, r#""confidence""#),
            (PromptVariant::Fsd, r#""fsd""#),
            (PromptVariant::InvD, r#""invd""#),
            (PromptVariant::InvDStep1, r#""invd-step1""#),
            (PromptVariant::InvDStep2, r#""invd-step2""#),
            (
                PromptVariant::InvDGenerated("x".to_owned()),
                r#"{"invd-generated":"x"}"#,
            ),
        ];
        for (variant, expected) in cases {
            let json = serde_json::to_string(&variant).unwrap();
            assert_eq!(json, expected);
            let back: PromptVariant = serde_json::from_str(&json).unwrap();
            assert_eq!(back, variant);
        }
        assert_eq!(PromptVariant::InvDStep1.name(), "invd-step1");
        assert!(PromptVariant::InvDGenerated(String::new()).validate().is_err());
        assert!(PromptVariant::ebmp_default().validate().is_ok());
    }

    #[test]
    fn transcript_rendering_is_readable() {
        let p = ChatPrompt::new(vec![ChatMessage::system("s"), ChatMessage::user("u")]).unwrap();
        assert_eq!(p.render_transcript(), "[system]\ns\n\n[user]\nu");
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            "[a-z_]{1,8}"
        }

        fn fewshot_strategy() -> impl Strategy<Value = Vec<FewShotPair>> {
            proptest::collection::vec(
                (word(), word()).prop_map(|(c, l)| FewShotPair::new(c, l)),
                0..4,
            )
        }

        fn dict_strategy() -> impl Strategy<Value = Dictionary> {
            proptest::collection::vec(word(), 1..5).prop_map(|labels| Dictionary {
                labels,
                true_label_index: 0,
                truncated: false,
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn prop_skeleton_builders_satisfy_structure(
                d in dict_strategy(),
                fs in fewshot_strategy(),
                code in word(),
                instruction in proptest::option::of(word()),
            ) {
                let built = [
                    build_baseline(&d, &fs, &code).unwrap(),
                    build_abstain(&d, &fs, &code).unwrap(),
                    build_invd(&d, &fs, &code, instruction.as_deref()).unwrap(),
                ];
                for p in built {
                    prop_assert_eq!(p.messages()[0].role, Role::System);
                    let systems = p.messages().iter().filter(|m| m.role == Role::System).count();
                    prop_assert_eq!(systems, 1);
                    prop_assert_eq!(p.messages().last().unwrap().role, Role::User);
                    prop_assert!(p.messages().iter().all(|m| !m.content.is_empty()));
                    prop_assert_eq!(p.messages().len(), 2 + 2 * fs.len());
                }
            }

            #[test]
            fn prop_builders_are_pure(
                d in dict_strategy(),
                fs in fewshot_strategy(),
                code in word(),
            ) {
                prop_assert_eq!(
                    build_baseline(&d, &fs, &code).unwrap(),
                    build_baseline(&d, &fs, &code).unwrap()
                );
                prop_assert_eq!(
                    build_confidence(&d, &code).unwrap(),
                    build_confidence(&d, &code).unwrap()
                );
                prop_assert_eq!(
                    build_invd(&d, &fs, &code, Some("fix it")).unwrap(),
                    build_invd(&d, &fs, &code, Some("fix it")).unwrap()
                );
            }

            #[test]
            fn prop_fsd_message_count(
                d in dict_strategy(),
                clean in fewshot_strategy(),
                adv_n in 1usize..4,
                code in word(),
            ) {
                let adv: Vec<FewShotPair> = (0..adv_n)
                    .map(|i| FewShotPair::new(format!("p{i}"), format!("l{i}")))
                    .collect();
                let p = build_fsd(&d, &clean, &adv, &code).unwrap();
                prop_assert_eq!(p.messages().len(), 2 + 2 * (clean.len() + adv.len()));
            }
        }
    }
}
