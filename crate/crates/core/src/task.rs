//! Task instances: one verifiable question with ground truth and the rule
//! used to check answers against it.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::reward::AnswerRule;

/// One verifiable problem: question text, opaque image references, ground
/// truth, and how answers are checked. Images are reference ids resolved by
/// tool servers from episode metadata, never inline pixel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
    pub ground_truth: String,
    pub task_type: String,
    #[serde(default)]
    pub answer_rule: AnswerRule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskError {
    EmptyId,
    EmptyGroundTruth { id: String },
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::EmptyId => write!(f, "task instance has an empty id"),
            TaskError::EmptyGroundTruth { id } => {
                write!(f, "task instance `{id}` has an empty ground truth")
            }
        }
    }
}

impl TaskInstance {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.is_empty() {
            return Err(TaskError::EmptyId);
        }
        if self.ground_truth.is_empty() {
            return Err(TaskError::EmptyGroundTruth {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn test_validate() {
        let mut inst = TaskInstance {
            id: "geo-001".to_string(),
            question: "Find m∠R.".to_string(),
            image_refs: Vec::new(),
            ground_truth: "58".to_string(),
            task_type: "Geometric Reasoning".to_string(),
            answer_rule: AnswerRule::ExactText,
        };
        assert!(inst.validate().is_ok());
        inst.ground_truth.clear();
        assert!(inst.validate().is_err());
    }

    #[test]
    fn test_answer_rule_defaults_to_exact_text() {
        let parsed: TaskInstance = serde_json::from_str(
            r#"{"id":"a","question":"q","ground_truth":"1","task_type":"Chart Understanding"}"#,
        )
        .unwrap();
        assert_eq!(parsed.answer_rule, AnswerRule::ExactText);
        assert!(parsed.image_refs.is_empty());
    }
}
