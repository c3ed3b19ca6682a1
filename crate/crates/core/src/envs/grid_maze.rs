use std::collections::{BTreeMap, VecDeque};

use super::{ActionSpace, EnvSpec, Environment, StepResult};
use crate::error::{DiceError, Result};
use crate::numerics::Action;

pub const DEFAULT_HORIZON: usize = 100;
pub const SIZE: usize = 8;

/// `#` wall, `S` start, `G` goal. Row 0 is the top.
const LAYOUT: [&str; SIZE] = [
    "S...#...",
    ".##.#.#.",
    ".#....#.",
    ".#.####.",
    "...#....",
    "##.#.##.",
    "....#...",
    ".###...G",
];

/// Moves in action order: up, down, left, right.
const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Fixed 8x8 maze with one goal. Observation is the one-hot encoding of the
/// agent's cell; bumping into a wall or the border leaves the agent in place.
/// Reaching the goal pays +1 and ends the episode; every other step pays 0.
#[derive(Debug, Clone)]
pub struct GridMaze {
    spec: EnvSpec,
    walls: [[bool; SIZE]; SIZE],
    start: (usize, usize),
    goal: (usize, usize),
    pos: (usize, usize),
    t: usize,
    done: bool,
}

impl GridMaze {
    pub fn new(horizon: usize, reward_scale: f64) -> Result<Self> {
        let mut walls = [[false; SIZE]; SIZE];
        let (mut start, mut goal) = ((0, 0), (0, 0));
        for (r, row) in LAYOUT.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls[r][c] = true,
                    'S' => start = (r, c),
                    'G' => goal = (r, c),
                    _ => {}
                }
            }
        }
        let spec = EnvSpec {
            name: "grid_maze".into(),
            obs_dim: SIZE * SIZE,
            action: ActionSpace::Discrete(4),
            horizon,
            reward_scale,
        };
        spec.validate()?;
        Ok(GridMaze {
            spec,
            walls,
            start,
            goal,
            pos: start,
            t: 0,
            done: true,
        })
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = vec![0.0; SIZE * SIZE];
        obs[self.pos.0 * SIZE + self.pos.1] = 1.0;
        obs
    }

    fn next_cell(&self, from: (usize, usize), action: usize) -> (usize, usize) {
        let (dr, dc) = MOVES[action];
        let r = from.0 as isize + dr;
        let c = from.1 as isize + dc;
        if r < 0 || c < 0 || r >= SIZE as isize || c >= SIZE as isize || self.walls[r as usize][c as usize] {
            from
        } else {
            (r as usize, c as usize)
        }
    }

    /// Actions along a shortest path from start to goal (breadth-first search).
    pub fn shortest_path(&self) -> Vec<usize> {
        let mut prev: BTreeMap<(usize, usize), ((usize, usize), usize)> = BTreeMap::new();
        let mut queue = VecDeque::from([self.start]);
        while let Some(cell) = queue.pop_front() {
            if cell == self.goal {
                break;
            }
            for a in 0..4 {
                let next = self.next_cell(cell, a);
                if next != self.start && !prev.contains_key(&next) {
                    prev.insert(next, (cell, a));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut cell = self.goal;
        while cell != self.start {
            let (p, a) = prev[&cell];
            path.push(a);
            cell = p;
        }
        path.reverse();
        path
    }
}

impl Environment for GridMaze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = self.start;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(DiceError::Contract("grid_maze: step after done".into()));
        }
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            other => return Err(DiceError::Contract(format!("grid_maze: invalid action {other:?}"))),
        };
        self.pos = self.next_cell(self.pos, a);
        self.t += 1;
        let at_goal = self.pos == self.goal;
        self.done = at_goal || self.t >= self.spec.horizon;
        Ok(StepResult {
            next_obs: self.observe(),
            reward: if at_goal { self.spec.reward_scale } else { 0.0 },
            done: self.done,
            info: BTreeMap::new(),
        })
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
