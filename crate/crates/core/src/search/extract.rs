use serde::{Deserialize, Serialize};

use super::SearchOutcome;
use crate::model::{Judgment, Prompt, Response};

/// Chosen is the refined response, rejected the tree's root negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt: Prompt,
    pub chosen: Response,
    pub rejected: Response,
}

/// `(x, y_p, j_p, y_refined)`: a successful refinement together with the
/// parent it was refined from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerTuple {
    pub prompt: Prompt,
    pub parent: Response,
    pub parent_judgment: Judgment,
    pub refined: Response,
    pub node_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub prompt: Prompt,
    pub response: Response,
    pub judgment: Judgment,
    pub node_id: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingRecords {
    pub dpo_pair: Option<DpoPair>,
    pub refiner_tuples: Vec<RefinerTuple>,
    pub judgment_records: Vec<JudgmentRecord>,
}

pub fn extract_training_records(outcome: &SearchOutcome) -> TrainingRecords {
    let tree = &outcome.tree;
    let prompt = &tree.prompt;
    let dpo_pair = tree.refined_node().map(|refined| DpoPair {
        prompt: prompt.clone(),
        chosen: refined.response.clone(),
        rejected: tree.root().response.clone(),
    });
    let refiner_tuples = tree
        .nodes()
        .iter()
        .filter(|n| n.judgment.label.follows())
        .filter_map(|n| {
            let parent = tree.node(n.parent_id?)?;
            Some(RefinerTuple {
                prompt: prompt.clone(),
                parent: parent.response.clone(),
                parent_judgment: parent.judgment.clone(),
                refined: n.response.clone(),
                node_id: n.node_id,
            })
        })
        .collect();
    let judgment_records = tree
        .nodes()
        .iter()
        .map(|n| JudgmentRecord {
            prompt: prompt.clone(),
            response: n.response.clone(),
            judgment: n.judgment.clone(),
            node_id: n.node_id,
        })
        .collect();
    TrainingRecords { dpo_pair, refiner_tuples, judgment_records }
}
