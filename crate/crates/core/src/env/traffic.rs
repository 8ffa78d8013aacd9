//! Traffic junction: cars on two crossing one-way roads.
//!
//! A 7x7 grid carries one horizontal road (row 3, driving left to right) and
//! one vertical road (column 3, driving top to bottom); they share the center
//! cell. Up to five agents drive cars that spawn at lane entries, choose gas
//! or brake each step, and pay a time cost plus a heavy penalty for sharing a
//! cell. Agents whose cars exit become available to spawn again within the
//! same episode. Spawning ignores occupancy: a fresh car can land on a car
//! parked at the entry, so camping a lane entry invites a pile-up rather
//! than shutting the lane down.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 7;
pub const N_ROUTES: usize = 2;
pub const ROUTE_LEN: usize = 7;
pub const N_AGENTS: usize = 5;
pub const EPISODE_STEPS: usize = 20;
/// last action (2) + route (2) + position (49) + car count (1) + inactive (1)
pub const OBS_LEN: usize = 2 + N_ROUTES + GRID * GRID + 1 + 1;

pub const STEP_COST: f32 = 0.01;
pub const COLLISION_COST: f32 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Gas,
    Brake,
}

/// Grid cell on route `route` at position `pos`, as a flat `row*GRID+col`.
pub fn route_cell(route: usize, pos: usize) -> usize {
    debug_assert!(route < N_ROUTES && pos < ROUTE_LEN);
    match route {
        0 => 3 * GRID + pos,  // row 3, left to right
        _ => pos * GRID + 3,  // column 3, top to bottom
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Car {
    active: bool,
    route: usize,
    pos: usize,
    /// Steps this car has been charged for; increments before each reward.
    age: u32,
    last_action: Option<Action>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curriculum {
    pub low: f64,
    pub high: f64,
    pub start: u64,
    pub end: u64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum { low: 0.1, high: 0.3, start: 250, end: 1250 }
    }
}

/// Spawn probability at a training iteration: flat at `low` until `start`,
/// linear up to `high` at `end`, flat after.
pub fn curriculum_rate(iteration: u64, c: &Curriculum) -> f64 {
    if iteration <= c.start {
        c.low
    } else if iteration >= c.end {
        c.high
    } else {
        c.low + (c.high - c.low) * (iteration - c.start) as f64 / (c.end - c.start) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEvent {
    pub step: usize,
    pub agent: usize,
    pub cell: usize,
    pub action: Action,
    pub reward: f32,
    pub collisions: u32,
}

pub struct TrafficEnv {
    cars: [Car; N_AGENTS],
    step_idx: usize,
    crashed: bool,
    rng: ChaCha8Rng,
    pub trace: Option<Vec<TraceEvent>>,
}

impl TrafficEnv {
    pub fn new(rng: ChaCha8Rng) -> Self {
        TrafficEnv { cars: Default::default(), step_idx: 0, crashed: false, rng, trace: None }
    }

    pub fn reset(&mut self) {
        self.cars = Default::default();
        self.step_idx = 0;
        self.crashed = false;
        if let Some(t) = &mut self.trace {
            t.clear();
        }
    }

    pub fn step_idx(&self) -> usize {
        self.step_idx
    }

    pub fn done(&self) -> bool {
        self.step_idx >= EPISODE_STEPS
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }

    pub fn active_count(&self) -> usize {
        self.cars.iter().filter(|c| c.active).count()
    }

    pub fn is_active(&self, agent: usize) -> bool {
        self.cars[agent].active
    }

    /// Spawn phase: each lane rolls `p` at most once, in lane order, while an
    /// inactive agent remains; a success activates the lowest-id inactive
    /// agent at the lane entry, occupied or not.
    pub fn spawn(&mut self, p: f64) {
        for route in 0..N_ROUTES {
            let Some(agent) = self.cars.iter().position(|c| !c.active) else { break };
            if self.rng.gen_bool(p) {
                self.cars[agent] = Car { active: true, route, pos: 0, age: 0, last_action: None };
            }
        }
    }

    /// Observation for one agent; inactive agents get all zeros plus the
    /// trailing inactive flag.
    pub fn observe(&self, agent: usize, out: &mut [f32]) {
        assert_eq!(out.len(), OBS_LEN);
        out.fill(0.0);
        let car = &self.cars[agent];
        if !car.active {
            out[OBS_LEN - 1] = 1.0;
            return;
        }
        match car.last_action {
            Some(Action::Gas) => out[0] = 1.0,
            Some(Action::Brake) => out[1] = 1.0,
            None => {}
        }
        out[2 + car.route] = 1.0;
        let cell = route_cell(car.route, car.pos);
        out[2 + N_ROUTES + cell] = 1.0;
        let count = self
            .cars
            .iter()
            .filter(|c| c.active && route_cell(c.route, c.pos) == cell)
            .count();
        out[2 + N_ROUTES + GRID * GRID] = count as f32;
    }

    /// Simultaneous moves, then collision counting and rewards. Cars driving
    /// off the end of their route are removed before rewards, so the exit
    /// step itself is free.
    pub fn apply(&mut self, actions: &[Action; N_AGENTS]) -> [f32; N_AGENTS] {
        assert!(self.step_idx < EPISODE_STEPS, "episode already done");
        for (car, &act) in self.cars.iter_mut().zip(actions) {
            if !car.active {
                continue;
            }
            car.last_action = Some(act);
            if act == Action::Gas {
                car.pos += 1;
                if car.pos == ROUTE_LEN {
                    *car = Car::default();
                }
            }
        }
        let mut counts = [0u8; GRID * GRID];
        for car in self.cars.iter().filter(|c| c.active) {
            counts[route_cell(car.route, car.pos)] += 1;
        }
        let mut rewards = [0.0f32; N_AGENTS];
        for (i, car) in self.cars.iter_mut().enumerate() {
            if !car.active {
                continue;
            }
            car.age += 1;
            let others = counts[route_cell(car.route, car.pos)] as u32 - 1;
            if others > 0 {
                self.crashed = true;
            }
            rewards[i] = -STEP_COST * car.age as f32 - COLLISION_COST * others as f32;
            if let Some(t) = &mut self.trace {
                t.push(TraceEvent {
                    step: self.step_idx,
                    agent: i,
                    cell: route_cell(car.route, car.pos),
                    action: car.last_action.unwrap(),
                    reward: rewards[i],
                    collisions: others,
                });
            }
        }
        self.step_idx += 1;
        rewards
    }
}

/// Fraction of episodes with no collision at any step, as a percentage.
pub fn success_rate(crashed_flags: &[bool]) -> f64 {
    if crashed_flags.is_empty() {
        return 100.0;
    }
    let clean = crashed_flags.iter().filter(|&&c| !c).count();
    100.0 * clean as f64 / crashed_flags.len() as f64
}
