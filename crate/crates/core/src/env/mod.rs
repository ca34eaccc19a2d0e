//! Deterministic 2-D tabletop manipulation suite.
//!
//! An effector moves in the unit square and can close its gripper. Four tasks
//! share one scene: reach a target, carry a block into a zone, press a button
//! and toggle a switch. Dynamics are deterministic; resets jitter object
//! positions and observations carry Gaussian noise.

mod instruction;
mod variant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RftfError};

pub use instruction::{
    Instruction, Task, EVAL_PARAPHRASES, INSTRUCTION_DIM, NUM_TASKS, PARAPHRASES_PER_TASK,
    PARAPHRASE_DIM, TRAIN_PARAPHRASES,
};
pub use variant::{
    builtin_variants, load_variants, parse_variant_list, parse_variants, EnvVariant, Layout,
    VariantId,
};

pub const HORIZON: usize = 100;
pub const A_MAX: f64 = 0.05;
pub const CONTACT_RADIUS: f64 = 0.05;
pub const REACH_TOLERANCE: f64 = 0.05;
pub const ZONE_TOLERANCE: f64 = 0.07;
pub const RESET_JITTER: f64 = 0.035;
/// The effector start is spread much wider than the objects.
pub const EFFECTOR_SPREAD: f64 = 0.3;
/// Gripper opening above which the gripper counts as closed.
pub const ENGAGE_THRESHOLD: f64 = 0.75;

pub const OBS_DIM: usize = 17;

/// Object positions that stay fixed for the lifetime of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub target: [f64; 2],
    pub zone: [f64; 2],
    pub button: [f64; 2],
    pub switch: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub effector: [f64; 2],
    pub gripper: f64,
    pub block: [f64; 2],
    pub button_pressed: bool,
    pub switch_on: bool,
    pub held: bool,
    pub step_count: usize,
    pub switch_initial: bool,
    pub scene: Scene,
}

impl WorldState {
    pub fn engaged(&self) -> bool {
        self.gripper > ENGAGE_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

/// Effector displacement and gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f64; 2],
    pub gripper_cmd: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        delta: [0.0, 0.0],
        gripper_cmd: 0.0,
    };

    pub fn new(dx: f64, dy: f64, gripper_cmd: f64) -> Self {
        Self {
            delta: [dx, dy],
            gripper_cmd,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.delta[0], self.delta[1], self.gripper_cmd]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn clamped(self) -> Self {
        Self::new(
            self.delta[0].clamp(-A_MAX, A_MAX),
            self.delta[1].clamp(-A_MAX, A_MAX),
            self.gripper_cmd.clamp(-1.0, 1.0),
        )
    }

    pub fn in_bounds(&self) -> bool {
        self.delta.iter().all(|d| d.abs() <= A_MAX) && self.gripper_cmd.abs() <= 1.0
    }
}

/// Lower/upper bound of each action dimension `(dx, dy, gripper)`.
pub fn action_bounds() -> [(f64, f64); 3] {
    [(-A_MAX, A_MAX), (-A_MAX, A_MAX), (-1.0, 1.0)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub fn success_predicate(state: &WorldState, instruction: &Instruction) -> bool {
    match instruction.task {
        Task::ReachTarget => dist(state.effector, state.scene.target) < REACH_TOLERANCE,
        Task::PushBlockToZone => dist(state.block, state.scene.zone) < ZONE_TOLERANCE,
        Task::PressButton => state.button_pressed,
        Task::ToggleSwitch => state.switch_on != state.switch_initial,
    }
}

/// Noise-free observation features of a state.
pub fn feature_map(state: &WorldState) -> Vec<f64> {
    let e = state.effector;
    let b = state.block;
    let s = &state.scene;
    let flag = |f: bool| if f { 1.0 } else { 0.0 };
    vec![
        e[0],
        e[1],
        state.gripper,
        b[0],
        b[1],
        flag(state.button_pressed),
        flag(state.switch_on),
        s.target[0] - e[0],
        s.target[1] - e[1],
        b[0] - e[0],
        b[1] - e[1],
        s.zone[0] - b[0],
        s.zone[1] - b[1],
        s.button[0] - e[0],
        s.button[1] - e[1],
        s.switch[0] - e[0],
        s.switch[1] - e[1],
    ]
}

/// One running episode. Owns its noise stream.
#[derive(Debug, Clone)]
pub struct Env {
    variant: EnvVariant,
    instruction: Instruction,
    state: WorldState,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    done: bool,
}

impl Env {
    /// Fresh scene: every object at its nominal position plus jitter.
    pub fn reset(variant: &EnvVariant, instruction: &Instruction, seed: u64) -> (Env, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &variant.layout;
        let effector = clamp_unit([
            l.effector[0] + rng.random_range(-EFFECTOR_SPREAD..=EFFECTOR_SPREAD),
            l.effector[1] + rng.random_range(-EFFECTOR_SPREAD..=EFFECTOR_SPREAD),
        ]);
        let mut jitter = |p: [f64; 2]| {
            clamp_unit([
                p[0] + rng.random_range(-RESET_JITTER..=RESET_JITTER),
                p[1] + rng.random_range(-RESET_JITTER..=RESET_JITTER),
            ])
        };
        let scene = Scene {
            target: jitter(l.target),
            zone: jitter(l.zone),
            button: jitter(l.button),
            switch: jitter(l.switch),
        };
        let block = jitter(l.block);
        let switch_on = rng.random_bool(0.5);
        let state = WorldState {
            effector,
            gripper: 0.0,
            block,
            button_pressed: false,
            switch_on,
            held: false,
            step_count: 0,
            switch_initial: switch_on,
            scene,
        };
        Self::start(variant, instruction, state, rng)
    }

    /// Next task of a chain: the effector returns to its start pose and the
    /// button springs back, while the block and the switch keep their state.
    pub fn reset_chained(
        variant: &EnvVariant,
        instruction: &Instruction,
        seed: u64,
        carry: &WorldState,
    ) -> (Env, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &variant.layout;
        let effector = clamp_unit([
            l.effector[0] + rng.random_range(-EFFECTOR_SPREAD..=EFFECTOR_SPREAD),
            l.effector[1] + rng.random_range(-EFFECTOR_SPREAD..=EFFECTOR_SPREAD),
        ]);
        let state = WorldState {
            effector,
            gripper: 0.0,
            block: carry.block,
            button_pressed: false,
            switch_on: carry.switch_on,
            held: false,
            step_count: 0,
            switch_initial: carry.switch_on,
            scene: carry.scene,
        };
        Self::start(variant, instruction, state, rng)
    }

    fn start(
        variant: &EnvVariant,
        instruction: &Instruction,
        state: WorldState,
        rng: ChaCha8Rng,
    ) -> (Env, Observation) {
        let noise = Normal::new(0.0, variant.obs_noise_sigma).expect("sigma validated >= 0");
        let mut env = Env {
            variant: variant.clone(),
            instruction: instruction.clone(),
            state,
            rng,
            noise,
            done: false,
        };
        let obs = env.observe();
        (env, obs)
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn variant(&self) -> &EnvVariant {
        &self.variant
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn observe(&mut self) -> Observation {
        let mut features = feature_map(&self.state);
        for f in &mut features {
            *f += self.noise.sample(&mut self.rng);
        }
        Observation { features }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(RftfError::Usage(format!(
                "step called on a finished episode (step {})",
                self.state.step_count
            )));
        }
        let a = action.clamped();
        let s = &mut self.state;
        let was_engaged = s.engaged();
        let before = s.effector;
        s.effector = clamp_unit([before[0] + a.delta[0], before[1] + a.delta[1]]);
        s.gripper = 0.5 * (a.gripper_cmd + 1.0);
        let engaged = s.engaged();
        if s.held && engaged {
            let moved = [s.effector[0] - before[0], s.effector[1] - before[1]];
            s.block = clamp_unit([s.block[0] + moved[0], s.block[1] + moved[1]]);
        }
        if !engaged {
            s.held = false;
        } else if !s.held && dist(s.effector, s.block) < CONTACT_RADIUS {
            s.held = true;
        }
        if engaged && dist(s.effector, s.scene.button) < CONTACT_RADIUS {
            s.button_pressed = true;
        }
        if engaged && !was_engaged && dist(s.effector, s.scene.switch) < CONTACT_RADIUS {
            s.switch_on = !s.switch_on;
        }
        s.step_count += 1;
        let success = success_predicate(&self.state, &self.instruction);
        self.done = success || self.state.step_count >= HORIZON;
        let observation = self.observe();
        Ok(StepOutcome {
            observation,
            done: self.done,
            success,
        })
    }
}
