//! Discrete skill sequencing as active inference over a factored POMDP.
//!
//! The model tracks two factors per subgoal: the robot's location relative to
//! the pick/place sites (`other`, `pick`, `place`) and the object's location
//! (`at start`, `inventory`, `at goal`). Observation modalities each address
//! one factor, so with product-form beliefs the factor-wise posterior
//!
//! ```text
//! q(s_f) ∝ prior_f(s_f) · Π_{m addressing f} A_m[o_m, s_f]
//! ```
//!
//! equals exact joint Bayes marginals. Skills are abstract actions; policies
//! (action sequences up to a horizon) are scored by expected free energy
//!
//! ```text
//! G(π) = Σ_τ Σ_m  KL[ q(o_τm) ‖ σ(C_m) ]  +  E_{q(s_τ)} H[ A_m(·|s) ]
//! ```
//!
//! (risk toward log-preferences `C`, plus likelihood ambiguity), and the
//! first action of the minimizer is executed. Ties break lexicographically
//! on action order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiscreteError {
    #[error("observation impossible under every state of factor {factor}")]
    ImpossibleObservation { factor: usize },
    #[error("no feasible policy (empty action set or zero horizon)")]
    PlanningStalled,
    #[error("model shape error: {0}")]
    Shape(String),
}

/// One observation modality: a likelihood map from a single factor's states
/// to observation outcomes. `matrix[(o, s)] = P(o | s)`; columns sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub factor: usize,
    pub matrix: DMatrix<f64>,
}

/// Transition of one factor under one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transition {
    /// `matrix[(to, from)]`; columns sum to one.
    Fixed(DMatrix<f64>),
    /// Transition depends on another factor's state; the push marginalizes
    /// over the current belief of that factor (exact for product beliefs).
    Conditioned { on: usize, matrices: Vec<DMatrix<f64>> },
}

/// Factored POMDP: per-factor state counts, likelihoods, per-action
/// transitions, log-preferences per modality, and initial priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub factor_dims: Vec<usize>,
    pub modalities: Vec<Modality>,
    /// `transitions[action][factor]`.
    pub transitions: Vec<Vec<Transition>>,
    /// Log-preference vector over each modality's outcomes.
    pub preferences: Vec<DVector<f64>>,
    pub priors: Vec<DVector<f64>>,
}

/// Product-form belief: one distribution per factor.
pub type Belief = Vec<DVector<f64>>;

impl DiscreteModel {
    pub fn validate(&self) -> Result<(), DiscreteError> {
        for m in &self.modalities {
            if m.factor >= self.factor_dims.len()
                || m.matrix.ncols() != self.factor_dims[m.factor]
            {
                return Err(DiscreteError::Shape("modality/factor mismatch".into()));
            }
            for s in 0..m.matrix.ncols() {
                let col: f64 = (0..m.matrix.nrows()).map(|o| m.matrix[(o, s)]).sum();
                if (col - 1.0).abs() > 1e-9 {
                    return Err(DiscreteError::Shape(format!(
                        "likelihood column {s} sums to {col}"
                    )));
                }
            }
        }
        for (ai, per_factor) in self.transitions.iter().enumerate() {
            if per_factor.len() != self.factor_dims.len() {
                return Err(DiscreteError::Shape(format!("action {ai} factor count")));
            }
            for (f, t) in per_factor.iter().enumerate() {
                let check = |m: &DMatrix<f64>| -> Result<(), DiscreteError> {
                    if m.nrows() != self.factor_dims[f] || m.ncols() != self.factor_dims[f] {
                        return Err(DiscreteError::Shape(format!(
                            "action {ai} factor {f} transition shape"
                        )));
                    }
                    for c in 0..m.ncols() {
                        let s: f64 = (0..m.nrows()).map(|r| m[(r, c)]).sum();
                        if (s - 1.0).abs() > 1e-9 {
                            return Err(DiscreteError::Shape(format!(
                                "action {ai} factor {f} column {c} sums to {s}"
                            )));
                        }
                    }
                    Ok(())
                };
                match t {
                    Transition::Fixed(m) => check(m)?,
                    Transition::Conditioned { on, matrices } => {
                        if *on >= self.factor_dims.len()
                            || matrices.len() != self.factor_dims[*on]
                        {
                            return Err(DiscreteError::Shape(format!(
                                "action {ai} factor {f} conditioning"
                            )));
                        }
                        for m in matrices {
                            check(m)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn initial_belief(&self) -> Belief {
        self.priors.clone()
    }
}

/// Factor-wise Bayesian update given one observation index per modality
/// (`None` marks a missing observation).
pub fn infer_state(
    model: &DiscreteModel,
    belief: &Belief,
    obs: &[Option<usize>],
) -> Result<Belief, DiscreteError> {
    if obs.len() != model.modalities.len() {
        return Err(DiscreteError::Shape("observation count != modalities".into()));
    }
    let mut posterior = belief.clone();
    for (m, o) in model.modalities.iter().zip(obs) {
        let Some(o) = o else { continue };
        if *o >= m.matrix.nrows() {
            return Err(DiscreteError::Shape("observation index out of range".into()));
        }
        for s in 0..model.factor_dims[m.factor] {
            posterior[m.factor][s] *= m.matrix[(*o, s)];
        }
    }
    for (f, p) in posterior.iter_mut().enumerate() {
        let z: f64 = p.iter().sum();
        if z <= 0.0 {
            return Err(DiscreteError::ImpossibleObservation { factor: f });
        }
        *p /= z;
    }
    Ok(posterior)
}

/// Pushes a belief through one action's transitions (belief-conditioned
/// marginalization for cross-factor dependencies).
pub fn predict(model: &DiscreteModel, belief: &Belief, action: usize) -> Belief {
    let mut out = Vec::with_capacity(belief.len());
    for (f, t) in model.transitions[action].iter().enumerate() {
        let pushed = match t {
            Transition::Fixed(m) => m * &belief[f],
            Transition::Conditioned { on, matrices } => {
                let mut acc = DVector::zeros(model.factor_dims[f]);
                for (s_on, m) in matrices.iter().enumerate() {
                    acc += m * &belief[f] * belief[*on][s_on];
                }
                acc
            }
        };
        out.push(pushed);
    }
    out
}

/// Expected free energy of one predicted belief: preference risk plus
/// likelihood ambiguity, summed over modalities.
pub fn expected_free_energy_term(model: &DiscreteModel, belief: &Belief) -> f64 {
    let mut g = 0.0;
    for (m, c) in model.modalities.iter().zip(&model.preferences) {
        // Predicted observation distribution.
        let q_o = &m.matrix * &belief[m.factor];
        // Softmax-normalized preferences.
        let max_c = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = c.iter().map(|v| (v - max_c).exp()).sum();
        for o in 0..q_o.len() {
            let q = q_o[o];
            if q > 1e-300 {
                let ln_pref = c[o] - max_c - z.ln();
                g += q * (q.ln() - ln_pref);
            }
        }
        // Ambiguity: expected entropy of the likelihood.
        for s in 0..model.factor_dims[m.factor] {
            let mut h = 0.0;
            for o in 0..m.matrix.nrows() {
                let p = m.matrix[(o, s)];
                if p > 1e-300 {
                    h -= p * p.ln();
                }
            }
            g += belief[m.factor][s] * h;
        }
    }
    g
}

/// Exhaustive policy scoring to `horizon`, returning the best first action.
/// Prefixes that leave the belief unchanged are pruned (no-progress actions
/// cannot improve a policy under static preferences).
pub fn select_skill(
    model: &DiscreteModel,
    belief: &Belief,
    horizon: usize,
) -> Result<usize, DiscreteError> {
    if horizon == 0 || model.transitions.is_empty() {
        return Err(DiscreteError::PlanningStalled);
    }
    let mut best: Option<(f64, usize)> = None;
    let mut stack: Vec<(Belief, f64, usize, usize)> = Vec::new();
    for first in 0..model.transitions.len() {
        let next = predict(model, belief, first);
        let g = expected_free_energy_term(model, &next);
        stack.push((next, g, 1, first));
    }
    // Depth-first over action sequences; `first` is carried unchanged.
    while let Some((b, g, depth, first)) = stack.pop() {
        if depth == horizon {
            match best {
                Some((bg, bf)) => {
                    if g < bg - 1e-12 || (g <= bg + 1e-12 && first < bf) {
                        best = Some((g, first));
                    }
                }
                None => best = Some((g, first)),
            }
            continue;
        }
        for action in 0..model.transitions.len() {
            let next = predict(model, &b, action);
            if belief_distance(&next, &b) < 1e-12 {
                // No-progress extension: the remaining steps repeat the same
                // EFE term; account for them directly instead of branching.
                let total = g + (horizon - depth) as f64 * expected_free_energy_term(model, &next);
                match best {
                    Some((bg, bf)) => {
                        if total < bg - 1e-12 || (total <= bg + 1e-12 && first < bf) {
                            best = Some((total, first));
                        }
                    }
                    None => best = Some((total, first)),
                }
                continue;
            }
            let g_next = g + expected_free_energy_term(model, &next);
            stack.push((next, g_next, depth + 1, first));
        }
    }
    best.map(|(_, a)| a).ok_or(DiscreteError::PlanningStalled)
}

fn belief_distance(a: &Belief, b: &Belief) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum()
}

/// Skill outcome reported back to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure,
}

/// Pushes the belief through the executed action and fuses the observation.
/// A failed manipulation leaves the object factor on its prior location (the
/// failure branch applies the identity to conditioned transitions).
pub fn advance(
    model: &DiscreteModel,
    belief: &Belief,
    action: usize,
    outcome: Outcome,
    obs: &[Option<usize>],
) -> Result<Belief, DiscreteError> {
    let pushed = match outcome {
        Outcome::Success => predict(model, belief, action),
        Outcome::Failure => {
            // Robot motion still happened (Move reports failure only via
            // timeouts upstream); object-factor transitions are skipped.
            let mut out = Vec::with_capacity(belief.len());
            for (f, t) in model.transitions[action].iter().enumerate() {
                let pushed = match t {
                    Transition::Fixed(m) => m * &belief[f],
                    Transition::Conditioned { .. } => belief[f].clone(),
                };
                out.push(pushed);
            }
            out
        }
    };
    infer_state(model, &pushed, obs)
}

// --- Task instantiation -----------------------------------------------------

/// Robot-location states of the subgoal model.
pub const ROBOT_OTHER: usize = 0;
pub const ROBOT_AT_PICK: usize = 1;
pub const ROBOT_AT_PLACE: usize = 2;
/// Object-location states.
pub const OBJ_AT_START: usize = 0;
pub const OBJ_IN_INVENTORY: usize = 1;
pub const OBJ_AT_GOAL: usize = 2;

/// Abstract planner actions over one subgoal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerAction {
    MoveToPick,
    MoveToPlace,
    Pick,
    Place,
}

pub const PLANNER_ACTIONS: [PlannerAction; 4] = [
    PlannerAction::MoveToPick,
    PlannerAction::MoveToPlace,
    PlannerAction::Pick,
    PlannerAction::Place,
];

/// Observation snapshot extracted per decision tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteObservation {
    /// Whether the gripper holds an object.
    pub holding: bool,
    /// Arrival state reported by Move: which site the robot is at, if any.
    pub robot_at: Option<usize>,
    /// Where the object is seen (start receptacle, with robot, goal
    /// receptacle), from the world map or privileged state.
    pub object_seen: usize,
    /// Outcome of the finished skill.
    pub skill_outcome: Outcome,
}

impl DiscreteObservation {
    /// Maps to modality observation indices (robot-at, holding, object-seen).
    pub fn to_modalities(&self) -> Vec<Option<usize>> {
        vec![
            self.robot_at,
            Some(if self.holding { 1 } else { 0 }),
            Some(self.object_seen),
        ]
    }
}

/// Builds the single-subgoal model of the task hierarchy: near-deterministic
/// likelihoods (`1 − smoothing` on the diagonal) and manipulation success
/// probability `p_succ` in the transition model.
pub fn subgoal_model(p_succ: f64, smoothing: f64) -> DiscreteModel {
    let eye3 = |eps: f64| {
        let off = eps / 2.0;
        DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 - eps,
                off,
                off,
                off,
                1.0 - eps,
                off,
                off,
                off,
                1.0 - eps,
            ],
        )
    };
    // Robot-at modality: identity-ish over robot_loc.
    let a_robot = Modality { factor: 0, matrix: eye3(smoothing) };
    // Holding modality: 1 iff object in inventory.
    let a_hold = Modality {
        factor: 1,
        matrix: DMatrix::from_row_slice(
            2,
            3,
            &[
                1.0 - smoothing,
                smoothing,
                1.0 - smoothing,
                smoothing,
                1.0 - smoothing,
                smoothing,
            ],
        ),
    };
    // Object-seen modality: identity-ish over object_loc.
    let a_seen = Modality { factor: 1, matrix: eye3(smoothing) };

    let ident = DMatrix::<f64>::identity(3, 3);
    let move_to = |target: usize| {
        let mut m = DMatrix::zeros(3, 3);
        for from in 0..3 {
            for to in 0..3 {
                m[(to, from)] = if to == target { 0.99 } else { 0.005 };
            }
        }
        m
    };
    // Pick: object start→inventory with p_succ when the robot is at pick.
    let pick_at_pick = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 - p_succ,
            0.0,
            0.0,
            p_succ,
            1.0,
            0.0,
            0.0,
            0.0,
            1.0,
        ],
    );
    // Place: inventory→goal with p_succ when the robot is at place.
    let place_at_place = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0,
            0.0,
            0.0,
            0.0,
            1.0 - p_succ,
            0.0,
            0.0,
            p_succ,
            1.0,
        ],
    );

    let transitions = vec![
        // MoveToPick
        vec![Transition::Fixed(move_to(ROBOT_AT_PICK)), Transition::Fixed(ident.clone())],
        // MoveToPlace
        vec![Transition::Fixed(move_to(ROBOT_AT_PLACE)), Transition::Fixed(ident.clone())],
        // Pick
        vec![
            Transition::Fixed(ident.clone()),
            Transition::Conditioned {
                on: 0,
                matrices: vec![ident.clone(), pick_at_pick, ident.clone()],
            },
        ],
        // Place
        vec![
            Transition::Fixed(ident.clone()),
            Transition::Conditioned {
                on: 0,
                matrices: vec![ident.clone(), ident.clone(), place_at_place],
            },
        ],
    ];

    // Preferences: strongly prefer seeing the object at its goal; mildly
    // disprefer carrying (so completed subgoals don't stall holding).
    let preferences = vec![
        DVector::zeros(3),
        DVector::from_vec(vec![0.0, -0.25]),
        DVector::from_vec(vec![0.0, 0.0, 4.0]),
    ];

    let model = DiscreteModel {
        factor_dims: vec![3, 3],
        modalities: vec![a_robot, a_hold, a_seen],
        transitions,
        preferences,
        priors: vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
        ],
    };
    model.validate().expect("subgoal model is well-formed");
    model
}

/// Decision from the subgoal planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerDecision {
    Execute(PlannerAction),
    SubgoalComplete,
    TaskComplete,
}

/// Sequences the episode's subgoals: one Fig.-2b model instance at a time,
/// beliefs carried across skills, subgoals loaded in order.
#[derive(Debug, Clone)]
pub struct SubgoalPlanner {
    pub model: DiscreteModel,
    pub belief: Belief,
    pub subgoal_index: usize,
    pub num_subgoals: usize,
    pub horizon: usize,
    /// Posterior mass on "object at goal" that closes a subgoal.
    pub completion_threshold: f64,
}

impl SubgoalPlanner {
    pub fn new(num_subgoals: usize, p_succ: f64, horizon: usize) -> Self {
        let model = subgoal_model(p_succ, 0.01);
        let belief = model.initial_belief();
        Self {
            model,
            belief,
            subgoal_index: 0,
            num_subgoals,
            horizon,
            completion_threshold: 0.8,
        }
    }

    /// Chooses the next skill, or reports subgoal/task completion.
    pub fn decide(&mut self) -> Result<PlannerDecision, DiscreteError> {
        if self.subgoal_index >= self.num_subgoals {
            return Ok(PlannerDecision::TaskComplete);
        }
        if self.belief[1][OBJ_AT_GOAL] >= self.completion_threshold {
            self.subgoal_index += 1;
            // Fresh object factor for the next subgoal; the robot keeps its
            // location belief.
            self.belief[1] = self.model.priors[1].clone();
            self.belief[0] = self.model.priors[0].clone();
            if self.subgoal_index >= self.num_subgoals {
                return Ok(PlannerDecision::TaskComplete);
            }
            return Ok(PlannerDecision::SubgoalComplete);
        }
        let action = select_skill(&self.model, &self.belief, self.horizon)?;
        Ok(PlannerDecision::Execute(PLANNER_ACTIONS[action]))
    }

    /// Abandons the current subgoal (retry budget exhausted or navigation
    /// dead end); the episode continues with the next one.
    pub fn skip_subgoal(&mut self) {
        self.subgoal_index += 1;
        self.belief[0] = self.model.priors[0].clone();
        self.belief[1] = self.model.priors[1].clone();
    }

    /// Folds an executed skill's outcome and observations into the belief.
    pub fn observe(
        &mut self,
        action: PlannerAction,
        obs: DiscreteObservation,
    ) -> Result<(), DiscreteError> {
        let idx = PLANNER_ACTIONS.iter().position(|a| *a == action).expect("known action");
        self.belief =
            advance(&self.model, &self.belief, idx, obs.skill_outcome, &obs.to_modalities())?;
        Ok(())
    }
}
