use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RftfError};

pub const NUM_TASKS: usize = 4;
pub const PARAPHRASES_PER_TASK: usize = 4;
pub const PARAPHRASE_DIM: usize = 8;
pub const INSTRUCTION_DIM: usize = NUM_TASKS + PARAPHRASE_DIM;

/// Paraphrases used while training (BC, value model, fine-tuning).
pub const TRAIN_PARAPHRASES: [usize; 2] = [0, 1];
/// Held-out paraphrases used only for chained evaluation.
pub const EVAL_PARAPHRASES: [usize; 2] = [2, 3];

const PARAPHRASE_SCALE: f64 = 0.05;
const PARAPHRASE_SEED: u64 = 0x7e57_ba5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ReachTarget,
    PushBlockToZone,
    PressButton,
    ToggleSwitch,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [
        Task::ReachTarget,
        Task::PushBlockToZone,
        Task::PressButton,
        Task::ToggleSwitch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::ReachTarget => "reach_target",
            Task::PushBlockToZone => "push_block_to_zone",
            Task::PressButton => "press_button",
            Task::ToggleSwitch => "toggle_switch",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = RftfError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| RftfError::Config(format!("unknown task `{s}`")))
    }
}

/// Task plus paraphrase, with its fixed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub task: Task,
    pub paraphrase_id: usize,
    pub embedding: Vec<f64>,
}

impl Instruction {
    /// One-hot task code followed by a fixed pseudo-random paraphrase code.
    pub fn new(task: Task, paraphrase_id: usize) -> Result<Self> {
        if paraphrase_id >= PARAPHRASES_PER_TASK {
            return Err(RftfError::Config(format!(
                "paraphrase {paraphrase_id} out of range (0..{PARAPHRASES_PER_TASK})"
            )));
        }
        let mut embedding = vec![0.0; INSTRUCTION_DIM];
        embedding[task.index()] = 1.0;
        let stream = (task.index() * PARAPHRASES_PER_TASK + paraphrase_id) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(PARAPHRASE_SEED ^ (stream << 32));
        for v in &mut embedding[NUM_TASKS..] {
            *v = PARAPHRASE_SCALE * rng.random_range(-1.0..1.0);
        }
        Ok(Self {
            task,
            paraphrase_id,
            embedding,
        })
    }

    pub fn all_for(paraphrases: &[usize]) -> Vec<Instruction> {
        Task::ALL
            .iter()
            .flat_map(|t| {
                paraphrases
                    .iter()
                    .map(move |p| Instruction::new(*t, *p).expect("paraphrase in range"))
            })
            .collect()
    }

    pub fn train_set() -> Vec<Instruction> {
        Self::all_for(&TRAIN_PARAPHRASES)
    }

    pub fn eval_set() -> Vec<Instruction> {
        Self::all_for(&EVAL_PARAPHRASES)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_deterministic_and_distinct() {
        for task in Task::ALL {
            let all: Vec<_> = (0..PARAPHRASES_PER_TASK)
                .map(|p| Instruction::new(task, p).unwrap())
                .collect();
            for (i, a) in all.iter().enumerate() {
                assert_eq!(a.embedding, Instruction::new(task, i).unwrap().embedding);
                assert_eq!(a.embedding.len(), INSTRUCTION_DIM);
                assert_eq!(a.embedding[task.index()], 1.0);
                for b in &all[i + 1..] {
                    assert_ne!(a.embedding, b.embedding);
                }
            }
        }
    }

    #[test]
    fn train_and_eval_paraphrases_are_disjoint() {
        assert!(TRAIN_PARAPHRASES.iter().all(|p| !EVAL_PARAPHRASES.contains(p)));
        assert_eq!(Instruction::train_set().len(), 8);
        assert!(Instruction::new(Task::PressButton, 4).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
    }
}
