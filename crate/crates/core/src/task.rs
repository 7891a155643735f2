use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four task families used for multi-task pretraining.
///
/// Heads are keyed by task kind by default, so every dataset of the same kind
/// shares one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Extractive reading comprehension; labels are `(start, end)` token indices.
    MrcSpan,
    /// Natural language inference: entailment / neutral / contradiction.
    Nli,
    /// Sentiment analysis as 5-way rating prediction.
    Sa,
    /// Paraphrase identification.
    Pi,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::MrcSpan, TaskKind::Nli, TaskKind::Sa, TaskKind::Pi];

    /// Class count for classification tasks, `None` for span extraction.
    pub fn n_classes(self) -> Option<usize> {
        match self {
            TaskKind::MrcSpan => None,
            TaskKind::Nli => Some(3),
            TaskKind::Sa => Some(5),
            TaskKind::Pi => Some(2),
        }
    }

    pub fn is_span(self) -> bool {
        matches!(self, TaskKind::MrcSpan)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MrcSpan => "mrc_span",
            TaskKind::Nli => "nli",
            TaskKind::Sa => "sa",
            TaskKind::Pi => "pi",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mrc_span" => Ok(TaskKind::MrcSpan),
            "nli" => Ok(TaskKind::Nli),
            "sa" => Ok(TaskKind::Sa),
            "pi" => Ok(TaskKind::Pi),
            other => Err(format!(
                "unknown task `{other}` (expected one of mrc_span, nli, sa, pi)"
            )),
        }
    }
}
