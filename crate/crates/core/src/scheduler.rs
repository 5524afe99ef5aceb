//! Tabular Q-learning choice of the post-processing family per mini-batch,
//! and the uniform random baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{OpFamily, N_FAMILIES};

/// What one unit of the epsilon schedule counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    /// One pass over the training set.
    #[default]
    Epoch,
    /// One mini-batch.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub n_states: usize,
    pub beta: f64,
    pub bias: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon0: f64,
    pub epsilon_hold_epochs: u64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub decay_unit: DecayUnit,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_states: N_FAMILIES,
            beta: 10.0,
            bias: vec![-0.001, 0.001, 0.0, 0.0, 0.0],
            alpha: 0.2,
            gamma: 0.5,
            epsilon0: 1.0,
            epsilon_hold_epochs: 8000,
            epsilon_decay: 2.5e-4,
            epsilon_floor: 0.0,
            decay_unit: DecayUnit::Epoch,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ParamDomain(m));
        if self.n_states != N_FAMILIES {
            return bad(format!("n_states must be {N_FAMILIES}, got {}", self.n_states));
        }
        if self.bias.len() != self.n_states {
            return bad(format!("bias has {} entries for {} states", self.bias.len(), self.n_states));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.epsilon_floor) || self.epsilon_decay < 0.0 {
            return bad("epsilon floor must be in [0, 1] and decay >= 0".into());
        }
        if !self.beta.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return bad("beta and bias must be finite".into());
        }
        Ok(())
    }

    /// Exploration rate after `units` completed schedule units: held at
    /// `epsilon0`, then decayed linearly, clamped to `[floor, 1]`.
    pub fn epsilon_at(&self, units: u64) -> f64 {
        let decayed = units.saturating_sub(self.epsilon_hold_epochs) as f64 * self.epsilon_decay;
        (self.epsilon0 - decayed).clamp(self.epsilon_floor, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "Q-table must be square");
        Self {
            n,
            values: rows.concat(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n..(s + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Index of the row maximum; ties go to the lowest index.
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current_state: usize,
    pub history: Vec<f64>,
    pub epsilon: f64,
    pub step: u64,
}

impl SchedulerState {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        Self {
            current_state: 0,
            history: vec![0.0; cfg.n_states],
            epsilon: cfg.epsilon_at(0),
            step: 0,
        }
    }
}

/// Greedy with probability `1 - epsilon`, uniform otherwise.
pub fn select_action<R: Rng + ?Sized>(state: &SchedulerState, q: &QTable, rng: &mut R) -> usize {
    let explore = rng.gen::<f64>() < state.epsilon;
    if explore {
        rng.gen_range(0..q.n())
    } else {
        q.argmax(state.current_state)
    }
}

/// `beta * (f - h[s']) + f + b[s']`.
pub fn compute_reward(f: f64, next_state: usize, history: &[f64], cfg: &SchedulerConfig) -> f64 {
    cfg.beta * (f - history[next_state]) + f + cfg.bias[next_state]
}

/// One Q-learning update of `Q(s, a)`.
pub fn update_q(q: &mut QTable, s: usize, a: usize, reward: f64, s_next: usize, cfg: &SchedulerConfig) {
    let old = q.get(s, a);
    let target = reward + cfg.gamma * q.max(s_next);
    q.set(s, a, old + cfg.alpha * (target - old));
}

/// One line of the scheduler trace log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub state: usize,
    pub action: usize,
    pub bitacc: f64,
    pub reward: f64,
    pub epsilon: f64,
    pub q_row: Vec<f64>,
}

/// Feeds back the batch accuracy `f` measured under `action`: reward, Q
/// update, then `h[action] = f`, then the state advances to `action`.
pub fn scheduler_step(
    state: &mut SchedulerState,
    q: &mut QTable,
    action: usize,
    f: f64,
    cfg: &SchedulerConfig,
) -> StepRecord {
    let s = state.current_state;
    let reward = compute_reward(f, action, &state.history, cfg);
    update_q(q, s, action, reward, action, cfg);
    state.history[action] = f;
    state.current_state = action;
    state.step += 1;
    if cfg.decay_unit == DecayUnit::Step {
        state.epsilon = cfg.epsilon_at(state.step);
    }
    StepRecord {
        step: state.step - 1,
        state: s,
        action,
        bitacc: f,
        reward,
        epsilon: state.epsilon,
        q_row: q.row(s).to_vec(),
    }
}

pub fn random_scheduler<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.gen_range(0..N_FAMILIES)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Rl,
    Random,
}

/// Training-loop facing scheduler: `choose` before a batch, `observe` after.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub config: SchedulerConfig,
    pub q: QTable,
    pub state: SchedulerState,
    pending: Option<usize>,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            kind,
            q: QTable::zeros(config.n_states),
            state: SchedulerState::new(&config),
            config,
            pending: None,
        })
    }

    pub fn choose<R: Rng + ?Sized>(&mut self, rng: &mut R) -> OpFamily {
        let a = match self.kind {
            SchedulerKind::Rl => select_action(&self.state, &self.q, rng),
            SchedulerKind::Random => random_scheduler(rng),
        };
        self.pending = Some(a);
        OpFamily::from_index(a).expect("action in range")
    }

    /// Records the accuracy of the batch processed under the last choice.
    /// The random scheduler only tracks history.
    pub fn observe(&mut self, f: f64) -> Result<StepRecord> {
        let a = self
            .pending
            .take()
            .ok_or_else(|| Error::ParamDomain("observe called without a pending choice".into()))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::ParamDomain(format!("batch accuracy {f} outside [0, 1]")));
        }
        Ok(match self.kind {
            SchedulerKind::Rl => scheduler_step(&mut self.state, &mut self.q, a, f, &self.config),
            SchedulerKind::Random => {
                let s = self.state.current_state;
                self.state.history[a] = f;
                self.state.current_state = a;
                self.state.step += 1;
                StepRecord {
                    step: self.state.step - 1,
                    state: s,
                    action: a,
                    bitacc: f,
                    reward: 0.0,
                    epsilon: 1.0,
                    q_row: self.q.row(s).to_vec(),
                }
            }
        })
    }

    /// Sets epsilon for the given number of completed epochs (when decaying
    /// per epoch).
    pub fn end_epoch(&mut self, completed_epochs: u64) {
        if self.config.decay_unit == DecayUnit::Epoch {
            self.state.epsilon = self.config.epsilon_at(completed_epochs);
        }
    }
}
