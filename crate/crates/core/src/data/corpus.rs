//! JSON Lines corpus format.
//!
//! ```text
//! {"history": [[{"role":"user","text":"..."}, ...], ...],
//!  "context": [{"role":"user","text":"..."}, ...],
//!  "response": {"role":"assistant","text":"..."}}
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{MscExample, Role, Session, Utterance};
use crate::error::{HahtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<MscExample>,
    pub split: Split,
}

impl Corpus {
    pub fn new(examples: Vec<MscExample>, split: Split) -> Self {
        Self { examples, split }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let _ = writeln!(out, "{}", example_to_json(ex));
        }
        out
    }
}

pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, split)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, corpus.to_jsonl())?;
    Ok(())
}

/// Parses JSONL text. Blank lines are skipped; errors carry the 1-based
/// line number.
pub fn parse_corpus(text: &str, split: Split) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let err = |message: String| HahtError::Corpus {
            line: line_no,
            message,
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        examples.push(example_from_json(&value).map_err(err)?);
    }
    if examples.is_empty() {
        return Err(HahtError::EmptyCorpus);
    }
    Ok(Corpus { examples, split })
}

fn example_from_json(v: &Value) -> Result<MscExample, String> {
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let history = field(obj, "history")?
        .as_array()
        .ok_or("history must be an array of sessions")?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let session = session_from_json(s).map_err(|e| format!("history[{i}]: {e}"))?;
            if session.is_empty() {
                return Err(format!("history[{i}]: empty session"));
            }
            Ok(session)
        })
        .collect::<Result<Vec<_>, String>>()?;
    let context = session_from_json(field(obj, "context")?).map_err(|e| format!("context: {e}"))?;
    if context.is_empty() {
        return Err("empty context".into());
    }
    let response =
        utterance_from_json(field(obj, "response")?).map_err(|e| format!("response: {e}"))?;
    if response.role != Role::Assistant {
        return Err("response role must be assistant".into());
    }
    Ok(MscExample {
        history,
        context,
        response,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field {name}"))
}

fn session_from_json(v: &Value) -> Result<Session, String> {
    let utterances = v
        .as_array()
        .ok_or("expected an array of utterances")?
        .iter()
        .map(utterance_from_json)
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Session::new(utterances))
}

fn utterance_from_json(v: &Value) -> Result<Utterance, String> {
    let obj = v.as_object().ok_or("expected an utterance object")?;
    let role = field(obj, "role")?
        .as_str()
        .ok_or("role must be a string")?;
    let role = Role::parse(role).ok_or_else(|| format!("unknown role {role:?}"))?;
    let text = field(obj, "text")?
        .as_str()
        .ok_or("text must be a string")?;
    Ok(Utterance::new(role, text))
}

#[derive(Serialize)]
struct UtteranceOut<'a> {
    role: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct ExampleOut<'a> {
    history: Vec<Vec<UtteranceOut<'a>>>,
    context: Vec<UtteranceOut<'a>>,
    response: UtteranceOut<'a>,
}

fn utterance_out(u: &Utterance) -> UtteranceOut<'_> {
    UtteranceOut {
        role: u.role.as_str(),
        text: &u.text,
    }
}

fn example_to_json(ex: &MscExample) -> String {
    let out = ExampleOut {
        history: ex
            .history
            .iter()
            .map(|s| s.utterances.iter().map(utterance_out).collect())
            .collect(),
        context: ex.context.utterances.iter().map(utterance_out).collect(),
        response: utterance_out(&ex.response),
    };
    serde_json::to_string(&out).expect("corpus serialization cannot fail")
}

/// Session openings: the first turn of a session that has history behind it.
pub fn filter_session_openings(corpus: &Corpus) -> Corpus {
    Corpus {
        examples: corpus
            .examples
            .iter()
            .filter(|e| e.context.len() <= 1 && !e.history.is_empty())
            .cloned()
            .collect(),
        split: corpus.split,
    }
}
