//! A worked example used across documentation and tests.
//!
//! [`EXAMPLE_CODE`] is the flattened `__init__` method of a small messaging
//! class; [`EXAMPLE_PERTURBED`] is the same stream after a five-site insert
//! perturbation (one `print` statement and four dead-code blocks). The two
//! recovery fixtures are model responses to the two-step inverse-transform
//! defense over the perturbed stream: one still carries a residual `traverse =
//! 1` assignment, the other is a clean recovery (both echo a leading `code:`
//! marker, which answer normalization strips).

use crate::corpus::{CodeSnippet, Vocabulary};
use crate::transforms::{self, Assignment, PerturbationPlan, SiteKind};

/// Flattened token stream of the example function.
pub const EXAMPLE_CODE: &str = "( self application name = python gntp notifications = [ ] default notifications = none application icon = none hostname = localhost password = none port = 23053 ) : self . application name = application name self . notifications = list ( notifications ) if default notifications : self . default notifications = list ( default notifications ) else : self . default notifications = self . notifications self . application icon = application icon self . password = password self . hostname = hostname self . port = int ( port )";

/// Ground-truth function name of [`EXAMPLE_CODE`].
pub const EXAMPLE_LABEL: &str = "__init__";

/// [`EXAMPLE_CODE`] after applying [`example_plan`]: a dead-code block after
/// the `if` header, a `print` call after the icon assignment, a dead-code
/// block after the hostname assignment, and two stacked dead-code blocks at
/// the end of the stream.
pub const EXAMPLE_PERTURBED: &str = "( self application name = python gntp notifications = [ ] default notifications = none application icon = none hostname = localhost password = none port = 23053 ) : self . application name = application name self . notifications = list ( notifications ) if default notifications : if false : traverse = 1 self . default notifications = list ( default notifications ) else : self . default notifications = self . notifications self . application icon = application icon print ( pspace ) self . password = password self . hostname = hostname if false : validity = 1 self . port = int ( port ) if false : sl = 1 if false : evoked = 1";

/// A recovery response that removed the `if false :` guards but left one
/// residual `traverse = 1` assignment behind (a Failure case for the two-step
/// defense).
pub const RECOVERY_WITH_RESIDUAL: &str = "code: ( self application name = python gntp notifications = [ ] default notifications = none application icon = none hostname = localhost password = none port = 23053 ) : self . application name = application name self . notifications = list ( notifications ) if default notifications : traverse = 1 self . default notifications = list ( default notifications ) else : self . default notifications = self . notifications self . application icon = application icon self . password = password self . hostname = hostname self . port = int ( port )";

/// A clean recovery response: token-identical to [`EXAMPLE_CODE`] after the
/// leading `code:` echo is stripped.
pub const RECOVERY_CLEAN: &str = "code: ( self application name = python gntp notifications = [ ] default notifications = none application icon = none hostname = localhost password = none port = 23053 ) : self . application name = application name self . notifications = list ( notifications ) if default notifications : self . default notifications = list ( default notifications ) else : self . default notifications = self . notifications self . application icon = application icon self . password = password self . hostname = hostname self . port = int ( port )";

/// The slot fillers written by [`example_plan`], in stream order.
pub const EXAMPLE_FILLERS: [&str; 5] = ["traverse", "pspace", "validity", "sl", "evoked"];

/// The example snippet as a [`CodeSnippet`].
#[must_use]
pub fn example_snippet() -> CodeSnippet {
    CodeSnippet::from_code("example", EXAMPLE_CODE, EXAMPLE_LABEL).expect("example is valid")
}

/// A vocabulary covering the example stream plus the plan's slot fillers and
/// both boolean literals.
#[must_use]
pub fn example_vocab() -> Vocabulary {
    let mut extras: Vec<String> = EXAMPLE_FILLERS.map(str::to_owned).to_vec();
    extras.push("true".to_owned());
    extras.push("false".to_owned());
    Vocabulary::build(&[example_snippet()], &extras)
}

/// The five-assignment insert plan taking [`EXAMPLE_CODE`] to
/// [`EXAMPLE_PERTURBED`]: dead code at gaps 49, 86, and twice at the trailing
/// gap 94, plus a print at gap 76.
#[must_use]
pub fn example_plan() -> PerturbationPlan {
    let sites = transforms::extract_sites(&example_snippet(), usize::MAX);
    let pick = |kind: SiteKind, gap: usize, ordinal: usize| {
        sites
            .iter()
            .find(|s| s.kind == kind && !s.kind.is_replace() && s.gap() == gap && s.ordinal == ordinal)
            .cloned()
            .unwrap_or_else(|| panic!("site {kind:?}@{gap}#{ordinal} missing"))
    };
    let assignments = vec![
        Assignment {
            site: pick(SiteKind::InsertDeadCode, 49, 0),
            token: "traverse".to_owned(),
        },
        Assignment {
            site: pick(SiteKind::InsertPrint, 76, 0),
            token: "pspace".to_owned(),
        },
        Assignment {
            site: pick(SiteKind::InsertDeadCode, 86, 0),
            token: "validity".to_owned(),
        },
        Assignment {
            site: pick(SiteKind::InsertDeadCode, 94, 0),
            token: "sl".to_owned(),
        },
        Assignment {
            site: pick(SiteKind::InsertDeadCode, 94, 1),
            token: "evoked".to_owned(),
        },
    ];
    PerturbationPlan { assignments }
}
