//! Discrete Grid World.
//!
//! States are cell coordinates `(x, y)`; actions are up (y+1), down (y−1),
//! left (x−1) and right (x+1). Moves that would leave the map or enter an
//! obstacle leave the agent where it is, but the transition is still emitted
//! and counted.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;

use super::dataset::{DatasetMeta, OfflineDataset, Transition};
use crate::counting::{LabelSequence, Quantizer};
use crate::error::{Error, Result};
use crate::rng::Rng64;

pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("grid action id {i} not in 0..4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GridAction::Up => "up",
            GridAction::Down => "down",
            GridAction::Left => "left",
            GridAction::Right => "right",
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            GridAction::Up => (0, 1),
            GridAction::Down => (0, -1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        }
    }
}

// Repo-defined obstacle layouts. Row 0 of each string is y = size−1, so the
// pictures read the way heatmaps are drawn.
const OBSTACLES_8: [&str; 8] = [
    "........",
    ".##.....",
    ".#...##.",
    ".#....#.",
    "....#...",
    "..###..#",
    "......##",
    "........",
];

const OBSTACLES_16: [&str; 16] = [
    "................",
    ".####......###..",
    ".#..........#...",
    ".#...####...#...",
    "........#.......",
    "...##...#...##..",
    "...#.........#..",
    "...#...##....#..",
    ".......##.......",
    "..#.........#...",
    "..#...###...#...",
    "..#.....#...###.",
    "........#.......",
    ".####...........",
    "......##...##...",
    "................",
];

/// The four count-accuracy maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMap {
    Open8,
    Obstacles8,
    Open16,
    Obstacles16,
}

impl GridMap {
    pub const ALL: [GridMap; 4] = [GridMap::Open8, GridMap::Obstacles8, GridMap::Open16, GridMap::Obstacles16];

    pub fn id(self) -> &'static str {
        match self {
            GridMap::Open8 => "grid8",
            GridMap::Obstacles8 => "grid8-obstacles",
            GridMap::Open16 => "grid16",
            GridMap::Obstacles16 => "grid16-obstacles",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown grid map '{id}'")))
    }

    pub fn size(self) -> usize {
        match self {
            GridMap::Open8 | GridMap::Obstacles8 => 8,
            GridMap::Open16 | GridMap::Obstacles16 => 16,
        }
    }

    pub fn layout(self) -> GridLayout {
        match self {
            GridMap::Open8 => GridLayout::open(8),
            GridMap::Open16 => GridLayout::open(16),
            GridMap::Obstacles8 => GridLayout::from_rows(&OBSTACLES_8).expect("valid layout"),
            GridMap::Obstacles16 => GridLayout::from_rows(&OBSTACLES_16).expect("valid layout"),
        }
    }
}

/// Square map with an obstacle mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    size: usize,
    blocked: Vec<bool>,
}

impl GridLayout {
    pub fn open(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
        }
    }

    /// Parses rows of `.` (free) and `#` (obstacle); the first row is the top.
    pub fn from_rows(rows: &[&str]) -> Result<Self> {
        let size = rows.len();
        let mut blocked = vec![false; size * size];
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != size {
                return Err(Error::Config(format!("layout row {r} is not {size} wide")));
            }
            let y = size - 1 - r;
            for (x, c) in row.chars().enumerate() {
                blocked[y * size + x] = match c {
                    '.' => false,
                    '#' => true,
                    other => return Err(Error::Config(format!("bad layout char '{other}'"))),
                };
            }
        }
        Ok(Self { size, blocked })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size
    }

    pub fn is_blocked(&self, x: usize, y: usize) -> bool {
        self.blocked[y * self.size + x]
    }

    pub fn block(&mut self, x: usize, y: usize) {
        self.blocked[y * self.size + x] = true;
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                if !self.is_blocked(x, y) {
                    cells.push((x, y));
                }
            }
        }
        cells
    }

    /// Deterministic move: blocked or out-of-bounds targets leave the agent in place.
    pub fn next_position(&self, pos: (usize, usize), action: GridAction) -> (usize, usize) {
        let (dx, dy) = action.delta();
        let (nx, ny) = (pos.0 as i64 + dx, pos.1 as i64 + dy);
        if self.in_bounds(nx, ny) && !self.is_blocked(nx as usize, ny as usize) {
            (nx as usize, ny as usize)
        } else {
            pos
        }
    }
}

/// An agent on a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridWorld {
    layout: GridLayout,
    position: (usize, usize),
}

impl GridWorld {
    pub fn new(layout: GridLayout, start: (usize, usize)) -> Result<Self> {
        if !layout.in_bounds(start.0 as i64, start.1 as i64) || layout.is_blocked(start.0, start.1) {
            return Err(Error::Config(format!("start {start:?} is not a free cell")));
        }
        Ok(Self {
            layout,
            position: start,
        })
    }

    pub fn position(&self) -> (usize, usize) {
        self.position
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    /// Applies `action` and returns the transition; reward is always 0 here.
    pub fn step(&mut self, action: GridAction) -> Transition {
        let before = self.position;
        self.position = self.layout.next_position(before, action);
        Transition {
            state: cell_state(before),
            action: vec![action.index() as f64],
            reward: 0.0,
            next_state: cell_state(self.position),
            done: false,
        }
    }
}

pub fn cell_state(pos: (usize, usize)) -> Vec<f64> {
    vec![pos.0 as f64, pos.1 as f64]
}

fn cell_of(state: &[f64], size: usize) -> Result<(usize, usize)> {
    let to_idx = |v: f64| -> Result<usize> {
        if v.fract() == 0.0 && v >= 0.0 && (v as usize) < size {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{v} is not a cell coordinate in a {size}-grid")))
        }
    };
    if state.len() != 2 {
        return Err(Error::Dimension { context: "grid state", expected: 2, got: state.len() });
    }
    Ok((to_idx(state[0])?, to_idx(state[1])?))
}

fn action_of(action: &[f64]) -> Result<GridAction> {
    match action {
        [a] if a.fract() == 0.0 && *a >= 0.0 => GridAction::from_index(*a as usize),
        _ => Err(Error::Config(format!("{action:?} is not a grid action id"))),
    }
}

/// Exact visitation counts over `(x, y, action)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    size: usize,
    counts: Vec<u64>,
}

impl CountTable {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size * NUM_ACTIONS],
        }
    }

    fn index(&self, x: usize, y: usize, a: usize) -> usize {
        (y * self.size + x) * NUM_ACTIONS + a
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, y: usize, action: GridAction) -> u64 {
        self.counts[self.index(x, y, action.index())]
    }

    pub fn set(&mut self, x: usize, y: usize, action: GridAction, value: u64) {
        let i = self.index(x, y, action.index());
        self.counts[i] = value;
    }

    pub fn increment(&mut self, x: usize, y: usize, action: GridAction) {
        let i = self.index(x, y, action.index());
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Every `(x, y, action, count)` entry in row-major cell order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, GridAction, u64)> + '_ {
        (0..self.size).flat_map(move |y| {
            (0..self.size).flat_map(move |x| {
                GridAction::ALL
                    .into_iter()
                    .map(move |a| (x, y, a, self.get(x, y, a)))
            })
        })
    }

    /// CSV with columns `x,y,action,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,action,count\n");
        for (x, y, a, c) in self.entries() {
            let _ = writeln!(out, "{x},{y},{},{c}", a.name());
        }
        out
    }

    /// Plain-text portable graymap (P2) of one action's counts, top row is
    /// the highest y, scaled so `max_value` maps to 255.
    pub fn to_pgm(&self, action: GridAction, max_value: u64) -> String {
        let max = max_value.max(1);
        let mut out = format!("P2\n{} {}\n255\n", self.size, self.size);
        for y in (0..self.size).rev() {
            let row: Vec<String> = (0..self.size)
                .map(|x| (self.get(x, y, action) * 255 / max).min(255).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Uniform-random walk of `steps` moves from a random free cell; returns the
/// dataset and the counts recorded along the way.
pub fn generate_grid_dataset(map: GridMap, steps: usize, rng: &mut Rng64, seed: u64) -> (OfflineDataset, CountTable) {
    let layout = map.layout();
    let free = layout.free_cells();
    let start = free[rng.random_range(0..free.len())];
    let mut world = GridWorld::new(layout, start).expect("free start cell");
    let mut counts = CountTable::new(map.size());
    let mut transitions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = GridAction::ALL[rng.random_range(0..NUM_ACTIONS)];
        let (x, y) = world.position();
        counts.increment(x, y, action);
        transitions.push(world.step(action));
    }
    let meta = DatasetMeta {
        env_id: map.id().to_string(),
        state_dim: 2,
        action_dim: 1,
        policy: "random".into(),
        seed,
        best_return: 0.0,
    };
    (OfflineDataset { meta, transitions }, counts)
}

/// Exact multiset counts of a discrete dataset.
pub fn exact_count_oracle(dataset: &OfflineDataset) -> Result<CountTable> {
    let size = grid_size_of(&dataset.meta.env_id)?;
    let mut table = CountTable::new(size);
    for t in &dataset.transitions {
        let (x, y) = cell_of(&t.state, size)?;
        table.increment(x, y, action_of(&t.action)?);
    }
    Ok(table)
}

/// Grid size for a grid environment id; other environments are unsupported.
pub fn grid_size_of(env_id: &str) -> Result<usize> {
    if let Ok(map) = GridMap::from_id(env_id) {
        return Ok(map.size());
    }
    if env_id == GridTask::ENV_ID {
        return Ok(GridTask::SIZE);
    }
    Err(Error::Unsupported(format!(
        "exact counting needs a discrete environment, got '{env_id}'"
    )))
}

/// Labels a grid pair by its coordinates and action id directly; the
/// inputs are already discrete, so no learned quantizer is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridQuantizer {
    size: usize,
}

impl GridQuantizer {
    pub fn new(size: usize) -> Self {
        Self { size }
    }
}

impl Quantizer for GridQuantizer {
    fn labels(&self, state: &[f64], action: &[f64]) -> Result<LabelSequence> {
        let (x, y) = cell_of(state, self.size)?;
        let a = action_of(action)?;
        LabelSequence::new(&[x, y, a.index()], self.size.max(NUM_ACTIONS))
    }
}

/// Navigation task for offline control on an 8×8 map: reach the goal for a
/// terminal reward; trap cells end the episode with nothing. Behavior data
/// never enters a trap.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTask {
    layout: GridLayout,
    traps: Vec<(usize, usize)>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub goal_reward: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOutcome {
    pub next: (usize, usize),
    pub reward: f64,
    pub done: bool,
}

impl GridTask {
    pub const ENV_ID: &'static str = "grid8-trap";
    pub const SIZE: usize = 8;

    pub fn standard() -> Self {
        let rows = [
            "........",
            "........",
            "..##....",
            "..##....",
            "........",
            "........",
            "........",
            "........",
        ];
        Self {
            layout: GridLayout::from_rows(&rows).expect("valid layout"),
            // A band of cells beside the start that the behavior policy avoids.
            traps: vec![(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2), (3, 0), (3, 1)],
            start: (0, 0),
            goal: (7, 7),
            goal_reward: 10.0,
            horizon: 40,
        }
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn is_trap(&self, cell: (usize, usize)) -> bool {
        self.traps.contains(&cell)
    }

    pub fn step(&self, pos: (usize, usize), action: GridAction) -> GridOutcome {
        let next = self.layout.next_position(pos, action);
        if next == self.goal {
            GridOutcome { next, reward: self.goal_reward, done: true }
        } else if self.is_trap(next) {
            GridOutcome { next, reward: 0.0, done: true }
        } else {
            GridOutcome { next, reward: 0.0, done: false }
        }
    }

    /// Shortest-path action toward the goal avoiding traps (first in
    /// action order among equally short moves).
    pub fn expert_action(&self, pos: (usize, usize)) -> GridAction {
        let dist = self.distance_to_goal();
        let size = self.layout.size();
        let mut best = GridAction::Up;
        let mut best_d = u32::MAX;
        for a in GridAction::ALL {
            let n = self.layout.next_position(pos, a);
            if self.is_trap(n) {
                continue;
            }
            let d = dist[n.1 * size + n.0];
            if d < best_d {
                best_d = d;
                best = a;
            }
        }
        best
    }

    fn distance_to_goal(&self) -> Vec<u32> {
        let size = self.layout.size();
        let mut dist = vec![u32::MAX; size * size];
        let mut queue = VecDeque::new();
        dist[self.goal.1 * size + self.goal.0] = 0;
        queue.push_back(self.goal);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.1 * size + cell.0];
            for a in GridAction::ALL {
                // Moves are reversible on a grid, so neighbors of `cell`
                // are the cells one step away from it.
                let n = self.layout.next_position(cell, a);
                if n != cell && !self.is_trap(n) && dist[n.1 * size + n.0] == u32::MAX {
                    dist[n.1 * size + n.0] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// ε-noisy shortest-path behavior data. Noisy moves that would enter a
    /// trap are redrawn, so no transition ever reaches one.
    pub fn generate_dataset(&self, episodes: usize, noise: f64, rng: &mut Rng64, seed: u64) -> OfflineDataset {
        let mut transitions = Vec::new();
        let mut best_return = f64::NEG_INFINITY;
        for _ in 0..episodes {
            let mut pos = self.start;
            let mut ret = 0.0;
            for _ in 0..self.horizon {
                let mut action = if rng.random::<f64>() < noise {
                    GridAction::ALL[rng.random_range(0..NUM_ACTIONS)]
                } else {
                    self.expert_action(pos)
                };
                while self.is_trap(self.layout.next_position(pos, action)) {
                    action = GridAction::ALL[rng.random_range(0..NUM_ACTIONS)];
                }
                let out = self.step(pos, action);
                transitions.push(Transition {
                    state: cell_state(pos),
                    action: vec![action.index() as f64],
                    reward: out.reward,
                    next_state: cell_state(out.next),
                    done: out.done,
                });
                ret += out.reward;
                pos = out.next;
                if out.done {
                    break;
                }
            }
            best_return = best_return.max(ret);
        }
        let meta = DatasetMeta {
            env_id: Self::ENV_ID.into(),
            state_dim: 2,
            action_dim: 1,
            policy: "noisy-expert".into(),
            seed,
            best_return,
        };
        OfflineDataset { meta, transitions }
    }

    /// Undiscounted return of a deterministic policy from the start cell.
    pub fn rollout(&self, mut policy: impl FnMut((usize, usize)) -> GridAction) -> f64 {
        let mut pos = self.start;
        let mut ret = 0.0;
        for _ in 0..self.horizon {
            let out = self.step(pos, policy(pos));
            ret += out.reward;
            pos = out.next;
            if out.done {
                break;
            }
        }
        ret
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn boundary_move_keeps_position_and_emits_transition() {
        let mut w = GridWorld::new(GridLayout::open(8), (0, 0)).unwrap();
        let t = w.step(GridAction::Left);
        assert_eq!(w.position(), (0, 0));
        assert_eq!(t.state, vec![0.0, 0.0]);
        assert_eq!(t.next_state, vec![0.0, 0.0]);
        assert_eq!(t.action, vec![2.0]);
    }

    #[test]
    fn interior_right_moves_east() {
        let mut w = GridWorld::new(GridLayout::open(8), (3, 3)).unwrap();
        w.step(GridAction::Right);
        assert_eq!(w.position(), (4, 3));
    }

    #[test]
    fn obstacles_block_moves() {
        let mut layout = GridLayout::open(4);
        layout.block(2, 1);
        let mut w = GridWorld::new(layout, (1, 1)).unwrap();
        w.step(GridAction::Right);
        assert_eq!(w.position(), (1, 1));
    }

    #[test]
    fn start_on_obstacle_rejected() {
        let mut layout = GridLayout::open(4);
        layout.block(0, 0);
        assert!(GridWorld::new(layout, (0, 0)).is_err());
    }

    #[test]
    fn shipped_layouts_parse_and_are_connected() {
        for map in GridMap::ALL {
            let layout = map.layout();
            assert_eq!(layout.size(), map.size());
            let free = layout.free_cells();
            // Flood fill from the first free cell reaches every free cell.
            let mut seen = vec![false; map.size() * map.size()];
            let mut stack = vec![free[0]];
            while let Some(c) = stack.pop() {
                let i = c.1 * map.size() + c.0;
                if seen[i] {
                    continue;
                }
                seen[i] = true;
                for a in GridAction::ALL {
                    stack.push(layout.next_position(c, a));
                }
            }
            assert_eq!(seen.iter().filter(|&&s| s).count(), free.len(), "{}", map.id());
        }
        assert!(GridMap::Obstacles16.layout().free_cells().len() < 256);
    }

    #[test]
    fn dataset_counts_are_conserved() {
        let mut rng = SeedStream::new(3).rng("dataset");
        let (ds, counts) = generate_grid_dataset(GridMap::Obstacles8, 10_000, &mut rng, 3);
        assert_eq!(counts.total(), 10_000);
        assert_eq!(ds.len(), 10_000);
        assert_eq!(exact_count_oracle(&ds).unwrap(), counts);
    }

    #[test]
    fn empty_dataset_counts_zero() {
        let mut rng = SeedStream::new(3).rng("dataset");
        let (mut ds, _) = generate_grid_dataset(GridMap::Open8, 10, &mut rng, 3);
        ds.transitions.clear();
        assert_eq!(exact_count_oracle(&ds).unwrap().total(), 0);
    }

    #[test]
    fn continuous_env_has_no_oracle() {
        assert!(matches!(grid_size_of("pointmass"), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pgm_scales_counts() {
        let mut t = CountTable::new(2);
        t.set(0, 1, GridAction::Up, 4);
        t.set(1, 0, GridAction::Up, 2);
        assert_eq!(t.to_pgm(GridAction::Up, 4), "P2\n2 2\n255\n255 0\n0 127\n");
    }

    #[test]
    fn task_expert_reaches_goal_without_traps() {
        let task = GridTask::standard();
        let ret = task.rollout(|p| task.expert_action(p));
        assert_eq!(ret, task.goal_reward);
        let mut rng = SeedStream::new(5).rng("dataset");
        let ds = task.generate_dataset(50, 0.3, &mut rng, 5);
        assert!(ds.transitions.iter().all(|t| {
            let c = (t.next_state[0] as usize, t.next_state[1] as usize);
            !task.is_trap(c)
        }));
    }

    #[test]
    fn grid_quantizer_is_injective_on_cells() {
        let q = GridQuantizer::new(16);
        let a = q.labels(&[3.0, 4.0], &[1.0]).unwrap();
        let b = q.labels(&[4.0, 3.0], &[1.0]).unwrap();
        assert_ne!(a, b);
        assert!(q.labels(&[16.0, 0.0], &[0.0]).is_err());
        assert!(q.labels(&[0.0, 0.0], &[4.0]).is_err());
    }
}
