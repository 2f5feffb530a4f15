//! Multi-session chat state: completed sessions, the current session and a
//! cache of one history-memory row per completed session.

use serde::Serialize;

use crate::data::{MscExample, Session, Utterance};
use crate::error::{HahtError, Result};
use crate::model::generator::StepDiagnostics;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ChatTurn {
    pub user: String,
    pub response: String,
    /// History sessions visible to this turn.
    pub sessions: usize,
    /// True when the response came from the generic distribution alone.
    pub switch_bypassed: bool,
    pub steps: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct ChatState<'m> {
    model: &'m Model,
    history: Vec<Session>,
    memory: Vec<Tensor>,
    current: Session,
    max_len: usize,
}

impl<'m> ChatState<'m> {
    pub fn new(model: &'m Model, max_len: usize) -> Self {
        Self {
            model,
            history: Vec::new(),
            memory: Vec::new(),
            current: Session::default(),
            max_len,
        }
    }

    fn caches_memory(&self) -> bool {
        self.model.params.contains("agg.wq")
    }

    pub fn history(&self) -> &[Session] {
        &self.history
    }

    pub fn current(&self) -> &Session {
        &self.current
    }

    /// Rows currently cached; equals the completed-session count for
    /// hierarchical variants and zero otherwise.
    pub fn memory_rows(&self) -> usize {
        self.memory.len()
    }

    pub fn chat_step(&mut self, text: &str) -> Result<ChatTurn> {
        let user = Utterance::user(text);
        let mut context = self.current.clone();
        context.utterances.push(user.clone());
        let example = MscExample {
            history: self.history.clone(),
            context: context.clone(),
            response: Utterance::assistant(""),
        };
        let mut prepared = self.model.prepare(&example)?;
        if self.caches_memory() {
            prepared.history.clear();
            prepared.cached_memory = Some(if self.memory.is_empty() {
                Tensor::zeros(0, self.model.config.d)
            } else {
                Tensor::concat_rows(&self.memory.iter().collect::<Vec<_>>())
            });
        }
        let out = self.model.greedy_decode(&prepared, self.max_len)?;
        let response = self.model.vocab.decode(&out.ids).join(" ");
        context
            .utterances
            .push(Utterance::assistant(response.clone()));
        self.current = context;
        Ok(ChatTurn {
            user: text.to_string(),
            response,
            sessions: self.history.len(),
            switch_bypassed: out.steps.iter().all(|s| s.alpha_vh.is_none()),
            steps: out.steps,
        })
    }

    /// Closes the current session and adds it to the history.
    pub fn finalize_session(&mut self) -> Result<()> {
        if self.current.is_empty() {
            return Err(HahtError::EmptySession);
        }
        let session = std::mem::take(&mut self.current);
        if self.caches_memory() {
            self.memory.push(self.model.session_memory(&session)?);
        }
        self.history.push(session);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.memory.clear();
        self.current = Session::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny_model;

    #[test]
    fn session_lifecycle() {
        let model = tiny_model("full", 30, 2).unwrap();
        let mut chat = ChatState::new(&model, 5);
        let first = chat.chat_step("w1 w2").unwrap();
        assert!(first.switch_bypassed);
        assert_eq!(first.sessions, 0);
        chat.chat_step("w3").unwrap();
        assert_eq!(chat.current().len(), 4);
        chat.finalize_session().unwrap();
        assert_eq!(chat.history().len(), 1);
        assert_eq!(chat.history()[0].len(), 4);
        assert_eq!(chat.memory_rows(), 1);
        assert!(matches!(
            chat.finalize_session(),
            Err(HahtError::EmptySession)
        ));
        let turn = chat.chat_step("w4 w5").unwrap();
        assert_eq!(turn.sessions, 1);
        assert!(!turn.switch_bypassed);
        chat.reset();
        assert_eq!(chat.history().len(), 0);
        assert_eq!(chat.memory_rows(), 0);
    }

    #[test]
    fn responses_are_reproducible() {
        let model = tiny_model("full", 30, 3).unwrap();
        let run = || {
            let mut chat = ChatState::new(&model, 6);
            chat.chat_step("w1").unwrap();
            chat.finalize_session().unwrap();
            chat.chat_step("w2 w3").unwrap().response
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cached_rows_match_full_history_encoding() {
        let model = tiny_model("full", 30, 4).unwrap();
        let mut chat = ChatState::new(&model, 4);
        chat.chat_step("w1 w2").unwrap();
        chat.finalize_session().unwrap();
        chat.chat_step("w5").unwrap();
        chat.finalize_session().unwrap();
        let turn = chat.chat_step("w7 w8").unwrap();
        let ex = MscExample {
            history: chat.history().to_vec(),
            context: Session::new(vec![Utterance::user("w7 w8")]),
            response: Utterance::assistant(""),
        };
        let direct = model
            .greedy_decode(&model.prepare(&ex).unwrap(), 4)
            .unwrap();
        assert_eq!(model.vocab.decode(&direct.ids).join(" "), turn.response);
    }
}
