//! Desk-scale puzzle families: generators, exhaustive solvers, augmentations
//! and the JSON-lines dataset format.

mod dataset;
mod dihedral;
mod maze;
mod sudoku;

use serde::{Deserialize, Serialize};

pub use dataset::{
    augment, build_dataset, canonical_key, read_dataset, read_split, trajectory_sample,
    write_dataset, Dataset, DatasetManifest, DatasetSpec, SplitSizes, TypeCounts,
    GENERATOR_VERSION,
};
pub use dihedral::{dihedral_compose_brute, dihedral_transform, DIHEDRAL_ORDER};
pub use maze::{gen_maze, maze_path_order, solve_maze};
pub use sudoku::{gen_sudoku, solve_sudoku, sudoku_fill_order, SudokuSize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PuzzleType {
    Sudoku4,
    Sudoku6,
    Maze,
}

impl PuzzleType {
    pub const ALL: [PuzzleType; 3] = [PuzzleType::Sudoku4, PuzzleType::Sudoku6, PuzzleType::Maze];

    pub fn name(self) -> &'static str {
        match self {
            PuzzleType::Sudoku4 => "sudoku4",
            PuzzleType::Sudoku6 => "sudoku6",
            PuzzleType::Maze => "maze",
        }
    }

    fn tag(self) -> u64 {
        match self {
            PuzzleType::Sudoku4 => 1,
            PuzzleType::Sudoku6 => 2,
            PuzzleType::Maze => 3,
        }
    }
}

/// Token ids shared by every puzzle family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub pad: u32,
    pub blank: u32,
    /// Token of digit `d` is `digits[d-1]`.
    pub digits: Vec<u32>,
    pub wall: u32,
    pub open: u32,
    pub start: u32,
    pub goal: u32,
    pub path: u32,
    pub size: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            pad: 0,
            blank: 1,
            digits: (2..8).collect(),
            wall: 8,
            open: 9,
            start: 10,
            goal: 11,
            path: 12,
            size: 13,
        }
    }
}

impl VocabSpec {
    pub fn digit(&self, d: u8) -> u32 {
        self.digits[d as usize - 1]
    }

    /// Digit for a token, or `None` for non-digit tokens.
    pub fn digit_of(&self, token: u32) -> Option<u8> {
        self.digits
            .iter()
            .position(|&t| t == token)
            .map(|i| i as u8 + 1)
    }
}

/// One puzzle: input grid `x`, solved grid `y`, both row-major and padded
/// with PAD to the dataset's sequence length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleInstance {
    pub id: String,
    pub puzzle_type: PuzzleType,
    pub rows: usize,
    pub cols: usize,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl PuzzleInstance {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn seq_len(&self) -> usize {
        self.x.len()
    }

    /// Pads `x` and `y` with `pad` up to `len`.
    pub fn padded(mut self, len: usize, pad: u32) -> Result<Self> {
        if len < self.x.len() {
            return Err(Error::Puzzle(format!(
                "instance {} has {} tokens, longer than {len}",
                self.id,
                self.x.len()
            )));
        }
        self.x.resize(len, pad);
        self.y.resize(len, pad);
        Ok(self)
    }

    /// Checks the structural invariants and solution validity.
    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        let n = self.cells();
        if self.x.len() != self.y.len() || self.x.len() < n {
            return Err(Error::Puzzle(format!("{}: inconsistent lengths", self.id)));
        }
        if self.x[n..]
            .iter()
            .chain(&self.y[n..])
            .any(|&t| t != vocab.pad)
        {
            return Err(Error::Puzzle(format!(
                "{}: non-pad token in padding",
                self.id
            )));
        }
        for (&xt, &yt) in self.x[..n].iter().zip(&self.y[..n]) {
            let given = match self.puzzle_type {
                PuzzleType::Maze => xt != vocab.open,
                _ => xt != vocab.blank,
            };
            if given && xt != yt {
                return Err(Error::Puzzle(format!(
                    "{}: input disagrees with solution",
                    self.id
                )));
            }
        }
        match self.puzzle_type {
            PuzzleType::Sudoku4 | PuzzleType::Sudoku6 => {
                let size = SudokuSize::for_type(self.puzzle_type).expect("sudoku type");
                let grid = sudoku::tokens_to_grid(&self.y[..n], vocab)?;
                let sols = solve_sudoku(&grid, size.box_rows, size.box_cols, 2)?;
                if sols.len() != 1 || grid.contains(&0) {
                    return Err(Error::Puzzle(format!(
                        "{}: solution is not a valid grid",
                        self.id
                    )));
                }
            }
            PuzzleType::Maze => {
                let path = solve_maze(&self.x[..n], self.rows, self.cols, vocab)?;
                let interior = &path[1..path.len() - 1];
                for (i, &t) in self.y[..n].iter().enumerate() {
                    let on_path = interior.contains(&i);
                    if (t == vocab.path) != on_path {
                        return Err(Error::Puzzle(format!(
                            "{}: marked path is not the shortest path",
                            self.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}
