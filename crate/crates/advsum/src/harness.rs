//! Experiment orchestration: evaluation passes, metrics, and reports.
//!
//! An experiment measures one chat model over a snippet corpus. The harness
//! runs the passes in a fixed order — clean baseline over the survey set `S`,
//! then the correctly-answered subset `S_M`, then the adversarial baseline
//! and every requested defense variant over `S_M`'s perturbed snippets, with
//! the abstain variant last (it adds a clean pass of its own) — and folds the
//! parsed answers into an [`EvalReport`].
//!
//! Metrics follow the set notation `Correct(X)` / `Wrong(X)` / `Abstain(X)`:
//!
//! * accuracy on `S` is `Correct(S)/|S|`,
//! * attack success rate is `Wrong(S_M^adv)/|S_M|` — abstentions are *not*
//!   wrong, while malformed replies are,
//! * abstain rates divide abstention counts by `|S|` (clean) or `|S_M|`
//!   (adversarial).
//!
//! All percentages render with exact integer half-up rounding to two
//! decimals ([`Percent`]); reports are a pure function of the record set, so
//! re-rendering from cached responses is byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackRecord;
use crate::corpus::{build_dictionary, mix_seed, CodeSnippet, Dictionary};
use crate::llmclient::{
    parse_answer, parse_confidence, ChatRequest, ClientError, ParsedAnswer, Provider,
};
use crate::prompts::{
    build_abstain, build_baseline, build_confidence, build_fsd, build_invd, build_invd_two_step,
    ChatPrompt, FewShotPair, PromptError, PromptVariant,
};

/// Errors from metric computation, record handling, and experiment runs.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// A metric was requested over an empty record set.
    #[error("no records to aggregate")]
    EmptyRecords,
    /// A rate was requested with a zero denominator.
    #[error("rate denominator is zero")]
    ZeroDenominator,
    /// Two clean-baseline records share an origin id.
    #[error("duplicate origin id `{0}` in clean baseline records")]
    DuplicateOrigin(String),
    /// A record offered to `compute_sm` is not a clean baseline record.
    #[error("record for `{id}` is not a clean baseline record")]
    NotCleanBaseline {
        /// Origin id of the offending record.
        id: String,
    },
    /// The experiment spec is internally inconsistent.
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    /// An attack record references a snippet absent from the corpus.
    #[error("attack record references unknown origin id `{0}`")]
    UnknownAttackOrigin(String),
    /// Two attack records target the same snippet.
    #[error("duplicate attack record for origin id `{0}`")]
    DuplicateAttack(String),
    /// A prompt could not be constructed.
    #[error("prompt construction failed: {0}")]
    Prompt(#[from] PromptError),
    /// A client-side failure outside the per-call malformed-record path.
    #[error("client failure: {0}")]
    Client(#[from] ClientError),
    /// Reading or writing a records log failed.
    #[error("records log I/O failed: {0}")]
    Io(#[from] std::io::Error),
    /// A records log line failed to parse.
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord {
        /// 1-based line number.
        line: usize,
        /// Parser message.
        reason: String,
    },
}

/// Which form of a snippet a record evaluated.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// The original token stream.
    Clean,
    /// The perturbed token stream from an attack record.
    Adversarial,
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputKind::Clean => "clean",
            InputKind::Adversarial => "adversarial",
        })
    }
}

/// One model answer, parsed and judged.
///
/// Invariants (enforced by [`EvalRecord::new`]): `correct` implies the answer
/// is a [`ParsedAnswer::Label`] equal to the ground-truth label, and
/// `abstained` holds exactly when the answer is [`ParsedAnswer::Abstain`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Id of the snippet the query was about.
    pub origin_id: String,
    /// Prompt variant that produced the answer.
    pub variant: PromptVariant,
    /// Whether the query code was clean or perturbed.
    pub input_kind: InputKind,
    /// The parsed model reply.
    pub answer: ParsedAnswer,
    /// Whether the answer is the ground-truth label.
    pub correct: bool,
    /// Whether the model abstained.
    pub abstained: bool,
}

impl EvalRecord {
    /// Judges `answer` against `true_label` and assembles the record.
    #[must_use]
    pub fn new(
        origin_id: impl Into<String>,
        variant: PromptVariant,
        input_kind: InputKind,
        answer: ParsedAnswer,
        true_label: &str,
    ) -> Self {
        let correct = answer.label() == Some(true_label);
        let abstained = answer.is_abstain();
        EvalRecord {
            origin_id: origin_id.into(),
            variant,
            input_kind,
            answer,
            correct,
            abstained,
        }
    }
}

/// An exact rational percentage.
///
/// The raw ratio is retained; [`Percent::render`] rounds half-up to two
/// decimals using integer arithmetic only, so `607/1000` renders `"60.70"`
/// and `179/607` renders `"29.49"` with no float in the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percent {
    /// Count in the numerator.
    pub numerator: usize,
    /// Positive denominator.
    pub denominator: usize,
}

impl Percent {
    /// Builds the ratio `numerator/denominator`.
    ///
    /// # Errors
    ///
    /// [`HarnessError::ZeroDenominator`] when `denominator` is zero.
    pub fn new(numerator: usize, denominator: usize) -> Result<Self, HarnessError> {
        if denominator == 0 {
            return Err(HarnessError::ZeroDenominator);
        }
        Ok(Percent {
            numerator,
            denominator,
        })
    }

    /// The percentage as a float (for comparisons, never for rendering).
    #[must_use]
    pub fn value(&self) -> f64 {
        #[allow(clippy::cast_precision_loss)]
        {
            100.0 * self.numerator as f64 / self.denominator as f64
        }
    }

    /// Two-decimal half-up rendering, e.g. `"29.49"`.
    #[must_use]
    pub fn render(&self) -> String {
        let scaled = 10_000_u128 * self.numerator as u128;
        let den = self.denominator as u128;
        let mut hundredths = scaled / den;
        if 2 * (scaled % den) >= den {
            hundredths += 1;
        }
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Answer counts for one `(variant, input_kind)` cell.
///
/// Invariant: `correct + wrong + abstain + malformed` equals the number of
/// records folded in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    /// Ground-truth labels.
    pub correct: usize,
    /// Parsed labels that are not the ground truth.
    pub wrong: usize,
    /// Abstentions.
    pub abstain: usize,
    /// Unparseable replies.
    pub malformed: usize,
}

impl CellCounts {
    /// Folds one record into the counts.
    pub fn add(&mut self, record: &EvalRecord) {
        match &record.answer {
            ParsedAnswer::Malformed(_) => self.malformed += 1,
            ParsedAnswer::Abstain => self.abstain += 1,
            ParsedAnswer::Label(_) if record.correct => self.correct += 1,
            ParsedAnswer::Label(_) => self.wrong += 1,
        }
    }

    /// Total records folded in.
    #[must_use]
    pub fn total(&self) -> usize {
        self.correct + self.wrong + self.abstain + self.malformed
    }

    /// The attack-success numerator: wrong labels plus malformed replies.
    /// Abstentions are not wrong.
    #[must_use]
    pub fn wrong_for_asr(&self) -> usize {
        self.wrong + self.malformed
    }
}

/// One aggregated `(variant, input_kind)` cell of a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCell {
    /// Prompt variant of the records in this cell.
    pub variant: PromptVariant,
    /// Input kind of the records in this cell.
    pub input_kind: InputKind,
    /// The answer counts.
    pub counts: CellCounts,
}

/// Aggregated counts and derived metrics for one model's experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model the records came from.
    pub model_id: String,
    /// `|S|`: size of the surveyed clean set.
    pub s_size: usize,
    /// `|S_M|`: snippets the model answered correctly on the clean pass.
    pub sm_size: usize,
    /// Cells sorted by `(variant, input_kind)`.
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    /// Aggregates `records` into per-cell counts.
    ///
    /// `|S|` and `|S_M|` are derived from the clean baseline records, so the
    /// report is a pure function of the record set and re-aggregating a
    /// saved records log reproduces it exactly.
    #[must_use]
    pub fn from_records(model_id: impl Into<String>, records: &[EvalRecord]) -> Self {
        let mut map: BTreeMap<(PromptVariant, InputKind), CellCounts> = BTreeMap::new();
        for record in records {
            map.entry((record.variant.clone(), record.input_kind))
                .or_default()
                .add(record);
        }
        let cells: Vec<ReportCell> = map
            .into_iter()
            .map(|((variant, input_kind), counts)| ReportCell {
                variant,
                input_kind,
                counts,
            })
            .collect();
        let baseline_clean = cells
            .iter()
            .find(|c| c.variant == PromptVariant::Baseline && c.input_kind == InputKind::Clean)
            .map(|c| c.counts);
        let s_size = baseline_clean.map_or(0, |c| c.total());
        let sm_size = baseline_clean.map_or(0, |c| c.correct);
        EvalReport {
            model_id: model_id.into(),
            s_size,
            sm_size,
            cells,
        }
    }

    /// The counts for `(variant, input_kind)`, if any records landed there.
    #[must_use]
    pub fn cell(&self, variant: &PromptVariant, input_kind: InputKind) -> Option<&CellCounts> {
        self.cells
            .iter()
            .find(|c| &c.variant == variant && c.input_kind == input_kind)
            .map(|c| &c.counts)
    }

    /// `Correct(S)/|S|` from the clean baseline cell.
    #[must_use]
    pub fn accuracy_on_s(&self) -> Option<Percent> {
        let cell = self.cell(&PromptVariant::Baseline, InputKind::Clean)?;
        Percent::new(cell.correct, self.s_size).ok()
    }

    /// `Wrong(S_M^adv)/|S_M|` for `variant`'s adversarial cell.
    #[must_use]
    pub fn asr_for(&self, variant: &PromptVariant) -> Option<Percent> {
        let cell = self.cell(variant, InputKind::Adversarial)?;
        Percent::new(cell.wrong_for_asr(), self.sm_size).ok()
    }

    /// `Abstain(S)/|S|` for `variant`'s clean cell.
    #[must_use]
    pub fn abstain_on_clean(&self, variant: &PromptVariant) -> Option<Percent> {
        let cell = self.cell(variant, InputKind::Clean)?;
        Percent::new(cell.abstain, self.s_size).ok()
    }

    /// `Abstain(S_M^adv)/|S_M|` for `variant`'s adversarial cell.
    #[must_use]
    pub fn abstain_on_adversarial(&self, variant: &PromptVariant) -> Option<Percent> {
        let cell = self.cell(variant, InputKind::Adversarial)?;
        Percent::new(cell.abstain, self.sm_size).ok()
    }
}

/// The origin ids the model answered correctly on the clean baseline pass.
///
/// # Errors
///
/// [`HarnessError::NotCleanBaseline`] when a record is not a clean baseline
/// record, [`HarnessError::DuplicateOrigin`] when two records share an id.
pub fn compute_sm(clean_records: &[EvalRecord]) -> Result<BTreeSet<String>, HarnessError> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut sm = BTreeSet::new();
    for record in clean_records {
        if record.variant != PromptVariant::Baseline || record.input_kind != InputKind::Clean {
            return Err(HarnessError::NotCleanBaseline {
                id: record.origin_id.clone(),
            });
        }
        if !seen.insert(record.origin_id.as_str()) {
            return Err(HarnessError::DuplicateOrigin(record.origin_id.clone()));
        }
        if record.correct {
            sm.insert(record.origin_id.clone());
        }
    }
    Ok(sm)
}

/// `Correct(records)/|records|`.
///
/// # Errors
///
/// [`HarnessError::EmptyRecords`] on an empty slice.
pub fn accuracy(records: &[EvalRecord]) -> Result<Percent, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Percent::new(correct, records.len())
}

/// `Wrong(adv_records)/sm_size`. Abstentions are not wrong; malformed
/// replies are.
///
/// # Errors
///
/// [`HarnessError::ZeroDenominator`] when `sm_size` is zero.
pub fn asr(adv_records: &[EvalRecord], sm_size: usize) -> Result<Percent, HarnessError> {
    let wrong = adv_records
        .iter()
        .filter(|r| !r.correct && !r.abstained)
        .count();
    Percent::new(wrong, sm_size)
}

/// `Abstain(records)/denom`.
///
/// # Errors
///
/// [`HarnessError::ZeroDenominator`] when `denom` is zero.
pub fn abstain_rate(records: &[EvalRecord], denom: usize) -> Result<Percent, HarnessError> {
    let abstained = records.iter().filter(|r| r.abstained).count();
    Percent::new(abstained, denom)
}

/// Outcome of a two-step inverse-transform evaluation.
///
/// Exactly one outcome applies to every `(recovery, answer)` pair: recovery
/// equality decides Failure vs the success cases, the final label decides
/// full vs partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TwoStepOutcome {
    /// Recovered stream token-equal to the original and final label correct.
    FullSuccess,
    /// Recovered stream token-equal to the original but final label wrong.
    PartialSuccess,
    /// Recovered stream differs from the original.
    Failure,
}

impl fmt::Display for TwoStepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TwoStepOutcome::FullSuccess => "full-success",
            TwoStepOutcome::PartialSuccess => "partial-success",
            TwoStepOutcome::Failure => "failure",
        })
    }
}

/// Whitespace-normalizes a step-1 recovery reply into a token stream,
/// dropping the leading `code:` echo the recovery prompt induces (fused
/// `code:` or split `code :`).
#[must_use]
pub fn normalize_recovered(text: &str) -> Vec<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let rest: &[&str] = match tokens.as_slice() {
        ["code:", rest @ ..] => rest,
        ["code", ":", rest @ ..] => rest,
        all => all,
    };
    rest.iter().map(|t| (*t).to_owned()).collect()
}

/// Classifies one two-step evaluation: `recovered_text` is the step-1 reply
/// for a perturbed copy of `original`, and `final_answer` is the parsed
/// step-2 classification of the recovered code.
///
/// Recovery equality is judged on whitespace-normalized token streams.
#[must_use]
pub fn classify_two_step(
    original: &CodeSnippet,
    recovered_text: &str,
    final_answer: &ParsedAnswer,
) -> TwoStepOutcome {
    let recovered = normalize_recovered(recovered_text);
    if recovered != original.tokens {
        return TwoStepOutcome::Failure;
    }
    if final_answer.label() == Some(original.label.as_str()) {
        TwoStepOutcome::FullSuccess
    } else {
        TwoStepOutcome::PartialSuccess
    }
}

/// Everything one experiment run needs beyond the corpus, attacks, and
/// provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Model identifier sent with every request.
    pub model_id: String,
    /// Defense variants to evaluate after the baseline passes. Baseline
    /// itself and the two-step variants are rejected here.
    pub variants: Vec<PromptVariant>,
    /// Per-query candidate-dictionary size.
    pub dictionary_size: usize,
    /// Clean demonstration pairs per prompt.
    pub fewshot_clean: usize,
    /// Adversarial demonstration pairs for the few-shot defense.
    pub fewshot_adv: usize,
    /// Whether answer parsing falls back to whole-word label search.
    pub lenient_parsing: bool,
    /// Root seed for dictionary sampling and demonstration selection.
    pub seed: u64,
    /// Sampling temperature sent with every request.
    pub temperature: f64,
    /// Completion budget sent with every request.
    pub max_tokens: u32,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model_id: String::from("gpt-3.5-turbo"),
            variants: Vec::new(),
            dictionary_size: 500,
            fewshot_clean: 4,
            fewshot_adv: 4,
            lenient_parsing: false,
            seed: 0,
            temperature: 0.0,
            max_tokens: 16,
        }
    }
}

/// Demonstration pairs selected for an experiment, plus the snippet ids
/// they consumed (excluded from the survey set `S`).
#[derive(Clone, Debug, Default)]
pub struct FewShotSelection {
    /// `(clean code, label)` demonstration pairs.
    pub clean: Vec<FewShotPair>,
    /// `(perturbed code, label)` demonstration pairs.
    pub adversarial: Vec<FewShotPair>,
    /// Ids of the snippets the demonstrations were drawn from.
    pub excluded: BTreeSet<String>,
}

/// Appends a dead-code block whose filler token is fresh for `snippet`.
fn fallback_perturbation(snippet: &CodeSnippet) -> String {
    let mut filler = String::from("aux");
    let mut n = 0_u32;
    while snippet.tokens.iter().any(|t| *t == filler) {
        n += 1;
        filler = format!("aux{n}");
    }
    format!("{} if false : {filler} = 1", snippet.render_tokens())
}

/// Draws demonstration snippets for an experiment, deterministically from
/// `spec.seed`. The same snippets supply both clean and adversarial pairs;
/// an adversarial pair uses the snippet's attack record when one exists and
/// a synthetic dead-code insertion otherwise.
#[must_use]
pub fn select_fewshot(
    corpus: &[CodeSnippet],
    attacks: &[AttackRecord],
    spec: &ExperimentSpec,
) -> FewShotSelection {
    let want = spec.fewshot_clean.max(spec.fewshot_adv);
    if want == 0 {
        return FewShotSelection::default();
    }
    let by_id: HashMap<&str, &AttackRecord> =
        attacks.iter().map(|a| (a.origin_id.as_str(), a)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, "fewshot"));
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    indices.shuffle(&mut rng);
    let picked: Vec<&CodeSnippet> = indices
        .into_iter()
        .take(want.min(corpus.len()))
        .map(|i| &corpus[i])
        .collect();
    let clean = picked
        .iter()
        .take(spec.fewshot_clean)
        .map(|s| FewShotPair::new(s.render_tokens(), s.label.clone()))
        .collect();
    let adversarial = picked
        .iter()
        .take(spec.fewshot_adv)
        .map(|s| {
            let code = by_id
                .get(s.id.as_str())
                .map_or_else(|| fallback_perturbation(s), |a| a.perturbed_code.clone());
            FewShotPair::new(code, s.label.clone())
        })
        .collect();
    let excluded = picked.iter().map(|s| s.id.clone()).collect();
    FewShotSelection {
        clean,
        adversarial,
        excluded,
    }
}

/// The per-query candidate dictionary for `snippet`, seeded from the
/// experiment seed and the snippet id.
#[must_use]
pub fn snippet_dictionary(
    all_labels: &[String],
    snippet: &CodeSnippet,
    spec: &ExperimentSpec,
) -> Dictionary {
    build_dictionary(
        &snippet.label,
        all_labels,
        spec.dictionary_size,
        mix_seed(spec.seed, &format!("dict:{}", snippet.id)),
    )
}

/// Builds the prompt a variant asks over `code`.
///
/// The step variants render too — step 1 ignores the dictionary and
/// demonstrations, step 2 is the baseline over recovered code — although
/// [`run_experiment`] rejects them as report variants.
///
/// # Errors
///
/// Propagates the underlying builder's [`PromptError`]s.
pub fn variant_prompt(
    variant: &PromptVariant,
    dictionary: &Dictionary,
    fewshot: &FewShotSelection,
    code: &str,
) -> Result<ChatPrompt, PromptError> {
    match variant {
        PromptVariant::Baseline => build_baseline(dictionary, &fewshot.clean, code),
        PromptVariant::Abstain => build_abstain(dictionary, &fewshot.clean, code),
        PromptVariant::Confidence => build_confidence(dictionary, code),
        PromptVariant::Fsd => build_fsd(dictionary, &fewshot.clean, &fewshot.adversarial, code),
        PromptVariant::InvD => build_invd(dictionary, &fewshot.clean, code, None),
        PromptVariant::InvDGenerated(text) => {
            build_invd(dictionary, &fewshot.clean, code, Some(text))
        }
        PromptVariant::InvDStep1 => Ok(build_invd_two_step(code)?.0),
        PromptVariant::InvDStep2 => build_baseline(dictionary, &fewshot.clean, code),
    }
}

/// Wraps a prompt in the request `run_experiment` sends for it.
#[must_use]
pub fn experiment_request(spec: &ExperimentSpec, messages: ChatPrompt) -> ChatRequest {
    ChatRequest {
        model_id: spec.model_id.clone(),
        messages,
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
    }
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    /// Every evaluation record, in pass order.
    pub records: Vec<EvalRecord>,
    /// The aggregated report.
    pub report: EvalReport,
    /// `S_M`: ids answered correctly on the clean baseline pass.
    pub sm: BTreeSet<String>,
    /// Fingerprint of every provider call, in call order.
    pub call_fingerprints: Vec<String>,
}

/// Rejects inconsistent inputs before any provider call.
fn validate_experiment(
    corpus: &[CodeSnippet],
    attacks: &[AttackRecord],
    spec: &ExperimentSpec,
) -> Result<(), HarnessError> {
    let invalid = |reason: String| Err(HarnessError::InvalidSpec(reason));
    if corpus.is_empty() {
        return invalid(String::from("corpus is empty"));
    }
    if spec.model_id.is_empty() {
        return invalid(String::from("model id is empty"));
    }
    if spec.dictionary_size == 0 {
        return invalid(String::from("dictionary size must be at least 1"));
    }
    if !spec.temperature.is_finite() || spec.temperature < 0.0 {
        return invalid(format!(
            "temperature must be finite and nonnegative, got {}",
            spec.temperature
        ));
    }
    if spec.max_tokens == 0 {
        return invalid(String::from("max_tokens must be at least 1"));
    }
    let want = spec.fewshot_clean.max(spec.fewshot_adv);
    if want >= corpus.len() {
        return invalid(format!(
            "demonstration selection ({want}) would consume the whole corpus ({})",
            corpus.len()
        ));
    }
    let mut seen_variants: HashSet<&PromptVariant> = HashSet::new();
    for variant in &spec.variants {
        variant.validate()?;
        match variant {
            PromptVariant::Baseline => {
                return invalid(String::from(
                    "baseline is always evaluated; remove it from variants",
                ));
            }
            PromptVariant::InvDStep1 | PromptVariant::InvDStep2 => {
                return invalid(String::from(
                    "two-step variants are classified per snippet, not evaluated as report columns",
                ));
            }
            _ => {}
        }
        if !seen_variants.insert(variant) {
            return invalid(format!("duplicate variant `{variant}`"));
        }
    }
    let ids: HashSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
    let mut seen_attacks: HashSet<&str> = HashSet::new();
    for attack in attacks {
        if !ids.contains(attack.origin_id.as_str()) {
            return Err(HarnessError::UnknownAttackOrigin(attack.origin_id.clone()));
        }
        if !seen_attacks.insert(attack.origin_id.as_str()) {
            return Err(HarnessError::DuplicateAttack(attack.origin_id.clone()));
        }
        if attack.perturbed_code.is_empty() {
            return invalid(format!(
                "attack record for `{}` has empty perturbed code",
                attack.origin_id
            ));
        }
    }
    Ok(())
}

/// Runs one evaluation pass: one provider call per `(snippet, code)` item.
///
/// Calls are dispatched in parallel (bounded by the provider) and collected
/// in item order; a provider error becomes a malformed record for that item
/// and the pass continues.
fn run_pass(
    provider: &dyn Provider,
    spec: &ExperimentSpec,
    all_labels: &[String],
    fewshot: &FewShotSelection,
    items: &[(&CodeSnippet, String)],
    variant: &PromptVariant,
    input_kind: InputKind,
) -> Result<(Vec<EvalRecord>, Vec<String>), HarnessError> {
    let outcomes: Result<Vec<(EvalRecord, String)>, HarnessError> = items
        .par_iter()
        .map(|(snippet, code)| {
            let dictionary = snippet_dictionary(all_labels, snippet, spec);
            let prompt = variant_prompt(variant, &dictionary, fewshot, code)?;
            let request = experiment_request(spec, prompt);
            let fingerprint = request.fingerprint();
            let answer = match provider.complete(&request) {
                Ok(response) => {
                    if matches!(variant, PromptVariant::Confidence) {
                        parse_confidence(&response.text, &dictionary, spec.lenient_parsing).0
                    } else {
                        parse_answer(&response.text, &dictionary, spec.lenient_parsing)
                    }
                }
                Err(e) => ParsedAnswer::Malformed(format!("provider error: {e}")),
            };
            let record = EvalRecord::new(
                snippet.id.clone(),
                variant.clone(),
                input_kind,
                answer,
                &snippet.label,
            );
            Ok((record, fingerprint))
        })
        .collect();
    Ok(outcomes?.into_iter().unzip())
}

/// Runs a full experiment for one model.
///
/// Pass order: clean baseline over the survey set `S` (the corpus minus
/// demonstration snippets), `S_M` computation, adversarial baseline over the
/// attacked members of `S_M`, each requested defense variant over the same
/// adversarial items, and finally — when requested — the abstain variant,
/// which also runs a clean pass over `S`.
///
/// Provider failures mark the affected records malformed and the run
/// continues; inconsistent inputs abort before any call. Wrapping `provider`
/// in a file-backed caching provider makes the run resumable: completed
/// calls replay from the response cache.
///
/// # Errors
///
/// [`HarnessError::InvalidSpec`] (and the attack-record errors) from
/// validation; [`HarnessError::Prompt`] if a prompt cannot be built.
pub fn run_experiment(
    corpus: &[CodeSnippet],
    attacks: &[AttackRecord],
    provider: &dyn Provider,
    spec: &ExperimentSpec,
) -> Result<ExperimentOutput, HarnessError> {
    validate_experiment(corpus, attacks, spec)?;
    let fewshot = select_fewshot(corpus, attacks, spec);
    let all_labels: Vec<String> = corpus.iter().map(|s| s.label.clone()).collect();
    let survey: Vec<&CodeSnippet> = corpus
        .iter()
        .filter(|s| !fewshot.excluded.contains(&s.id))
        .collect();

    let mut records = Vec::new();
    let mut call_fingerprints = Vec::new();
    let clean_items: Vec<(&CodeSnippet, String)> =
        survey.iter().map(|s| (*s, s.render_tokens())).collect();
    let (clean_records, fingerprints) = run_pass(
        provider,
        spec,
        &all_labels,
        &fewshot,
        &clean_items,
        &PromptVariant::Baseline,
        InputKind::Clean,
    )?;
    let sm = compute_sm(&clean_records)?;
    records.extend(clean_records);
    call_fingerprints.extend(fingerprints);

    let by_id: HashMap<&str, &AttackRecord> =
        attacks.iter().map(|a| (a.origin_id.as_str(), a)).collect();
    let adv_items: Vec<(&CodeSnippet, String)> = survey
        .iter()
        .filter(|s| sm.contains(&s.id))
        .filter_map(|s| {
            by_id
                .get(s.id.as_str())
                .map(|a| (*s, a.perturbed_code.clone()))
        })
        .collect();
    let (adv_records, fingerprints) = run_pass(
        provider,
        spec,
        &all_labels,
        &fewshot,
        &adv_items,
        &PromptVariant::Baseline,
        InputKind::Adversarial,
    )?;
    records.extend(adv_records);
    call_fingerprints.extend(fingerprints);

    let (defenses, abstains): (Vec<&PromptVariant>, Vec<&PromptVariant>) = spec
        .variants
        .iter()
        .partition(|v| !matches!(v, PromptVariant::Abstain));
    for variant in defenses.into_iter().chain(abstains) {
        if matches!(variant, PromptVariant::Abstain) {
            let (clean_abstain, fingerprints) = run_pass(
                provider,
                spec,
                &all_labels,
                &fewshot,
                &clean_items,
                variant,
                InputKind::Clean,
            )?;
            records.extend(clean_abstain);
            call_fingerprints.extend(fingerprints);
        }
        let (defended, fingerprints) = run_pass(
            provider,
            spec,
            &all_labels,
            &fewshot,
            &adv_items,
            variant,
            InputKind::Adversarial,
        )?;
        records.extend(defended);
        call_fingerprints.extend(fingerprints);
    }

    let report = EvalReport::from_records(spec.model_id.clone(), &records);
    Ok(ExperimentOutput {
        records,
        report,
        sm,
        call_fingerprints,
    })
}

/// Output encodings for [`emit_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Comma-separated values with a header row.
    Csv,
    /// Aligned plain-text table.
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(format!("unknown report format `{other}` (csv|table)")),
        }
    }
}

/// The defense columns a report set needs, in deterministic order.
fn defense_columns(reports: &[EvalReport]) -> Vec<PromptVariant> {
    let mut set: BTreeSet<PromptVariant> = BTreeSet::new();
    for report in reports {
        for cell in &report.cells {
            if cell.input_kind == InputKind::Adversarial && cell.variant != PromptVariant::Baseline
            {
                set.insert(cell.variant.clone());
            }
        }
    }
    set.into_iter().collect()
}

/// Short distinct labels for the defense columns: the variant name, with a
/// positional suffix when one name covers several variants (several
/// generated instructions, say).
fn column_labels(columns: &[PromptVariant]) -> Vec<String> {
    let mut totals: HashMap<&str, usize> = HashMap::new();
    for variant in columns {
        *totals.entry(variant.name()).or_insert(0) += 1;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    columns
        .iter()
        .map(|variant| {
            let name = variant.name();
            let ordinal = seen.entry(name).and_modify(|n| *n += 1).or_insert(1);
            if totals[name] > 1 {
                format!("{name} ({ordinal})")
            } else {
                name.to_owned()
            }
        })
        .collect()
}

/// Escapes one CSV field (quotes fields containing separators or quotes).
fn csv_field(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_owned()
    }
}

/// Renders reports as one row per model.
///
/// Column order is deterministic: `Model`, accuracy on `S`, baseline ASR,
/// then one column per defense variant (the abstain variant contributes its
/// clean and adversarial abstain rates before its ASR). Cells without
/// records render `-`.
#[must_use]
pub fn emit_report(reports: &[EvalReport], format: ReportFormat) -> String {
    let columns = defense_columns(reports);
    let labels = column_labels(&columns);
    let mut headers: Vec<String> = vec![
        String::from("Model"),
        String::from("Acc on S (Correct(S)/|S|)"),
        String::from("ASR (Wrong(S_M^adv)/|S_M|)"),
    ];
    for (variant, label) in columns.iter().zip(&labels) {
        if matches!(variant, PromptVariant::Abstain) {
            headers.push(String::from("Abs on S (Abstain(S)/|S|)"));
            headers.push(String::from("Abs on S_M^adv (Abstain(S_M^adv)/|S_M|)"));
        }
        headers.push(format!("ASR {label}"));
    }
    let render = |value: Option<Percent>| value.map_or_else(|| String::from("-"), |p| p.render());
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(reports.len());
    for report in reports {
        let mut row = vec![
            report.model_id.clone(),
            render(report.accuracy_on_s()),
            render(report.asr_for(&PromptVariant::Baseline)),
        ];
        for variant in &columns {
            if matches!(variant, PromptVariant::Abstain) {
                row.push(render(report.abstain_on_clean(variant)));
                row.push(render(report.abstain_on_adversarial(variant)));
            }
            row.push(render(report.asr_for(variant)));
        }
        rows.push(row);
    }
    match format {
        ReportFormat::Csv => {
            let mut out = String::new();
            let header_line: Vec<String> = headers.iter().map(|h| csv_field(h)).collect();
            out.push_str(&header_line.join(","));
            out.push('\n');
            for row in &rows {
                let line: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Table => {
            let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
            for row in &rows {
                for (i, field) in row.iter().enumerate() {
                    widths[i] = widths[i].max(field.len());
                }
            }
            let render_line = |fields: &[String]| -> String {
                let cells: Vec<String> = fields
                    .iter()
                    .zip(&widths)
                    .map(|(f, w)| format!("{f:<w$}"))
                    .collect();
                let mut line = cells.join(" | ");
                line.truncate(line.trim_end().len());
                line
            };
            let mut out = String::new();
            out.push_str(&render_line(&headers));
            out.push('\n');
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
            for row in &rows {
                out.push_str(&render_line(row));
                out.push('\n');
            }
            out
        }
    }
}

/// Writes `records` as newline-delimited JSON for audit and re-aggregation.
///
/// # Errors
///
/// [`HarnessError::Io`] on filesystem failures.
pub fn save_records(path: &Path, records: &[EvalRecord]) -> Result<(), HarnessError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| HarnessError::MalformedRecord {
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a records log written by [`save_records`]. Blank lines are skipped.
///
/// # Errors
///
/// [`HarnessError::Io`] on filesystem failures,
/// [`HarnessError::MalformedRecord`] (with its 1-based line) on parse
/// failures.
pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord =
            serde_json::from_str(&line).map_err(|e| HarnessError::MalformedRecord {
                line: index + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}
