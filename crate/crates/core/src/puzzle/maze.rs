use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{PuzzleInstance, PuzzleType, VocabSpec};
use crate::error::{Error, Result};

/// Perfect maze on an odd `rows×cols` grid carved by randomized DFS, with
/// distinct start and goal rooms. `y` marks the interior of the path.
pub fn gen_maze<R: Rng>(
    rows: usize,
    cols: usize,
    id: String,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    if rows < 5 || cols < 5 || rows % 2 == 0 || cols % 2 == 0 {
        return Err(Error::Puzzle(format!(
            "maze dimensions must be odd and >= 5, got {rows}x{cols}"
        )));
    }
    let mut grid = vec![vocab.wall; rows * cols];
    let rooms: Vec<usize> = (0..rows / 2)
        .flat_map(|r| (0..cols / 2).map(move |c| (2 * r + 1) * cols + 2 * c + 1))
        .collect();
    let root = *rooms.choose(rng).expect("at least four rooms");
    grid[root] = vocab.open;
    let mut stack = vec![root];
    while let Some(&cur) = stack.last() {
        let (r, c) = (cur / cols, cur % cols);
        let mut next: Vec<(usize, usize)> = Vec::with_capacity(4);
        if r >= 3 {
            next.push((cur - 2 * cols, cur - cols));
        }
        if r + 2 < rows {
            next.push((cur + 2 * cols, cur + cols));
        }
        if c >= 3 {
            next.push((cur - 2, cur - 1));
        }
        if c + 2 < cols {
            next.push((cur + 2, cur + 1));
        }
        next.retain(|&(room, _)| grid[room] == vocab.wall);
        match next.choose(rng) {
            Some(&(room, between)) => {
                grid[between] = vocab.open;
                grid[room] = vocab.open;
                stack.push(room);
            }
            None => {
                stack.pop();
            }
        }
    }
    let picked: Vec<usize> = rooms.choose_multiple(rng, 2).copied().collect();
    let (start, goal) = (picked[0], picked[1]);
    grid[start] = vocab.start;
    grid[goal] = vocab.goal;
    let path = solve_maze(&grid, rows, cols, vocab)?;
    let mut solved = grid.clone();
    for &i in &path[1..path.len() - 1] {
        solved[i] = vocab.path;
    }
    Ok(PuzzleInstance {
        id,
        puzzle_type: PuzzleType::Maze,
        rows,
        cols,
        x: grid,
        y: solved,
    })
}

/// Shortest start-to-goal path by BFS, as cell indices including both ends.
pub fn solve_maze(grid: &[u32], rows: usize, cols: usize, vocab: &VocabSpec) -> Result<Vec<usize>> {
    if grid.len() != rows * cols {
        return Err(Error::Puzzle("maze size does not match dimensions".into()));
    }
    let find = |tok: u32, name: &str| -> Result<usize> {
        let mut it = grid
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tok)
            .map(|(i, _)| i);
        match (it.next(), it.next()) {
            (Some(i), None) => Ok(i),
            _ => Err(Error::Puzzle(format!("maze needs exactly one {name} cell"))),
        }
    };
    let start = find(vocab.start, "start")?;
    let goal = find(vocab.goal, "goal")?;
    let mut prev = vec![usize::MAX; grid.len()];
    prev[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(cur) = queue.pop_front() {
        if cur == goal {
            let mut path = vec![goal];
            let mut at = goal;
            while at != start {
                at = prev[at];
                path.push(at);
            }
            path.reverse();
            return Ok(path);
        }
        let (r, c) = (cur / cols, cur % cols);
        let mut nbrs = Vec::with_capacity(4);
        if r > 0 {
            nbrs.push(cur - cols);
        }
        if r + 1 < rows {
            nbrs.push(cur + cols);
        }
        if c > 0 {
            nbrs.push(cur - 1);
        }
        if c + 1 < cols {
            nbrs.push(cur + 1);
        }
        for n in nbrs {
            if prev[n] == usize::MAX && grid[n] != vocab.wall {
                prev[n] = cur;
                queue.push_back(n);
            }
        }
    }
    Err(Error::Puzzle("goal is unreachable".into()))
}

/// Interior path cells ordered from start to goal.
pub fn maze_path_order(instance: &PuzzleInstance, vocab: &VocabSpec) -> Result<Vec<usize>> {
    let n = instance.cells();
    let path = solve_maze(&instance.x[..n], instance.rows, instance.cols, vocab)?;
    Ok(path[1..path.len() - 1].to_vec())
}
