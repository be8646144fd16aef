use rand::seq::SliceRandom;
use rand::Rng;

use super::{PuzzleInstance, PuzzleType, VocabSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SudokuSize {
    pub box_rows: usize,
    pub box_cols: usize,
}

impl SudokuSize {
    pub const FOUR: SudokuSize = SudokuSize {
        box_rows: 2,
        box_cols: 2,
    };
    /// 6×6 grids use 2×3 boxes.
    pub const SIX: SudokuSize = SudokuSize {
        box_rows: 2,
        box_cols: 3,
    };

    pub fn side(self) -> usize {
        self.box_rows * self.box_cols
    }

    pub fn for_type(t: PuzzleType) -> Option<SudokuSize> {
        match t {
            PuzzleType::Sudoku4 => Some(Self::FOUR),
            PuzzleType::Sudoku6 => Some(Self::SIX),
            PuzzleType::Maze => None,
        }
    }

    fn puzzle_type(self) -> PuzzleType {
        if self == Self::SIX {
            PuzzleType::Sudoku6
        } else {
            PuzzleType::Sudoku4
        }
    }
}

struct Board {
    side: usize,
    box_rows: usize,
    box_cols: usize,
    cells: Vec<u8>,
    row_used: Vec<u32>,
    col_used: Vec<u32>,
    box_used: Vec<u32>,
}

impl Board {
    /// `None` if the givens already conflict.
    fn new(grid: &[u8], box_rows: usize, box_cols: usize) -> Option<Board> {
        let side = box_rows * box_cols;
        let mut b = Board {
            side,
            box_rows,
            box_cols,
            cells: vec![0; side * side],
            row_used: vec![0; side],
            col_used: vec![0; side],
            box_used: vec![0; side],
        };
        for (i, &d) in grid.iter().enumerate() {
            if d != 0 {
                if !b.allowed(i, d) {
                    return None;
                }
                b.set(i, d);
            }
        }
        Some(b)
    }

    fn box_of(&self, i: usize) -> usize {
        let (r, c) = (i / self.side, i % self.side);
        (r / self.box_rows) * (self.side / self.box_cols) + c / self.box_cols
    }

    fn allowed(&self, i: usize, d: u8) -> bool {
        let bit = 1u32 << d;
        let (r, c) = (i / self.side, i % self.side);
        (self.row_used[r] | self.col_used[c] | self.box_used[self.box_of(i)]) & bit == 0
    }

    fn set(&mut self, i: usize, d: u8) {
        let bit = 1u32 << d;
        let (r, c, bx) = (i / self.side, i % self.side, self.box_of(i));
        self.cells[i] = d;
        self.row_used[r] |= bit;
        self.col_used[c] |= bit;
        self.box_used[bx] |= bit;
    }

    fn clear(&mut self, i: usize) {
        let bit = 1u32 << self.cells[i];
        let (r, c, bx) = (i / self.side, i % self.side, self.box_of(i));
        self.cells[i] = 0;
        self.row_used[r] &= !bit;
        self.col_used[c] &= !bit;
        self.box_used[bx] &= !bit;
    }

    /// Row-major first empty cell, ascending digits (or `order` if given).
    fn search(&mut self, limit: usize, out: &mut Vec<Vec<u8>>, order: &mut dyn FnMut() -> Vec<u8>) {
        if out.len() >= limit {
            return;
        }
        let Some(i) = self.cells.iter().position(|&d| d == 0) else {
            out.push(self.cells.clone());
            return;
        };
        for d in order() {
            if self.allowed(i, d) {
                self.set(i, d);
                self.search(limit, out, order);
                self.clear(i);
                if out.len() >= limit {
                    return;
                }
            }
        }
    }
}

fn check_grid(grid: &[u8], box_rows: usize, box_cols: usize) -> Result<()> {
    let side = box_rows * box_cols;
    if box_rows == 0 || box_cols == 0 || side > 16 {
        return Err(Error::Puzzle(format!(
            "unsupported box {box_rows}x{box_cols}"
        )));
    }
    if grid.len() != side * side {
        return Err(Error::Puzzle(format!(
            "grid has {} cells, expected {}",
            grid.len(),
            side * side
        )));
    }
    if let Some(&d) = grid.iter().find(|&&d| d as usize > side) {
        return Err(Error::Puzzle(format!("digit {d} exceeds grid side {side}")));
    }
    Ok(())
}

/// All solutions (up to `limit`) by exhaustive backtracking. `0` marks a
/// blank. Solutions come in row-major cell, ascending digit order.
pub fn solve_sudoku(
    grid: &[u8],
    box_rows: usize,
    box_cols: usize,
    limit: usize,
) -> Result<Vec<Vec<u8>>> {
    check_grid(grid, box_rows, box_cols)?;
    let Some(mut board) = Board::new(grid, box_rows, box_cols) else {
        return Ok(Vec::new());
    };
    let side = board.side as u8;
    let mut out = Vec::new();
    board.search(limit, &mut out, &mut || (1..=side).collect());
    Ok(out)
}

/// Cells in the order the backtracking solver fills them: the blanks,
/// row-major.
pub fn sudoku_fill_order(grid: &[u8]) -> Vec<usize> {
    grid.iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| i)
        .collect()
}

fn random_complete<R: Rng>(size: SudokuSize, rng: &mut R) -> Vec<u8> {
    let side = size.side();
    let mut board =
        Board::new(&vec![0; side * side], size.box_rows, size.box_cols).expect("empty grid");
    let mut out = Vec::new();
    board.search(1, &mut out, &mut || {
        let mut digits: Vec<u8> = (1..=side as u8).collect();
        digits.shuffle(rng);
        digits
    });
    out.pop().expect("an empty grid always has a completion")
}

/// Random puzzle with a unique solution and a givens count in
/// `[min_givens, max_givens]`.
pub fn gen_sudoku<R: Rng>(
    size: SudokuSize,
    (min_givens, max_givens): (usize, usize),
    id: String,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    let cells = size.side() * size.side();
    if min_givens > max_givens || max_givens > cells || min_givens == 0 {
        return Err(Error::Puzzle(format!(
            "infeasible givens range [{min_givens},{max_givens}] for {cells} cells"
        )));
    }
    const ATTEMPTS: usize = 200;
    for _ in 0..ATTEMPTS {
        let solution = random_complete(size, rng);
        let mut puzzle = solution.clone();
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(rng);
        let mut givens = cells;
        for i in order {
            if givens <= min_givens {
                break;
            }
            let d = puzzle[i];
            puzzle[i] = 0;
            if solve_sudoku(&puzzle, size.box_rows, size.box_cols, 2)?.len() == 1 {
                givens -= 1;
            } else {
                puzzle[i] = d;
            }
        }
        if givens <= max_givens {
            let side = size.side();
            let tok = |d: u8| if d == 0 { vocab.blank } else { vocab.digit(d) };
            return Ok(PuzzleInstance {
                id,
                puzzle_type: size.puzzle_type(),
                rows: side,
                cols: side,
                x: puzzle.iter().map(|&d| tok(d)).collect(),
                y: solution.iter().map(|&d| tok(d)).collect(),
            });
        }
    }
    Err(Error::Puzzle(format!(
        "could not reach at most {max_givens} givens in {ATTEMPTS} attempts"
    )))
}

pub(crate) fn tokens_to_grid(tokens: &[u32], vocab: &VocabSpec) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            if t == vocab.blank {
                Ok(0)
            } else {
                vocab
                    .digit_of(t)
                    .ok_or_else(|| Error::Puzzle(format!("token {t} is not a sudoku symbol")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_conflict_has_no_solution() {
        let mut g = vec![0u8; 16];
        g[0] = 1;
        g[1] = 1;
        assert!(solve_sudoku(&g, 2, 2, usize::MAX).unwrap().is_empty());
    }

    #[test]
    fn solved_grid_is_its_only_solution() {
        let g = vec![1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];
        assert_eq!(solve_sudoku(&g, 2, 2, usize::MAX).unwrap(), vec![g]);
    }

    #[test]
    fn malformed_grids_are_errors() {
        assert!(solve_sudoku(&[0; 15], 2, 2, 1).is_err());
        let mut g = vec![0u8; 16];
        g[3] = 5;
        assert!(solve_sudoku(&g, 2, 2, 1).is_err());
    }

    #[test]
    fn solutions_respect_limit_and_order() {
        let sols = solve_sudoku(&[0; 16], 2, 2, 3).unwrap();
        assert_eq!(sols.len(), 3);
        assert!(sols.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sols[0][..4], [1, 2, 3, 4]);
    }

    #[test]
    fn full_givens_range_returns_complete_grid() {
        let vocab = VocabSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = gen_sudoku(SudokuSize::FOUR, (16, 16), "a".into(), &vocab, &mut rng).unwrap();
        assert_eq!(p.x, p.y);
    }

    #[test]
    fn generation_is_seeded() {
        let vocab = VocabSpec::default();
        let a = gen_sudoku(
            SudokuSize::SIX,
            (8, 20),
            "a".into(),
            &vocab,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        let b = gen_sudoku(
            SudokuSize::SIX,
            (8, 20),
            "a".into(),
            &vocab,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        assert_eq!(a, b);
        a.validate(&vocab).unwrap();
    }

    #[test]
    fn infeasible_range_is_an_error() {
        let vocab = VocabSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gen_sudoku(SudokuSize::FOUR, (5, 4), "a".into(), &vocab, &mut rng).is_err());
        assert!(gen_sudoku(SudokuSize::FOUR, (1, 2), "a".into(), &vocab, &mut rng).is_err());
    }

    #[test]
    fn fill_order_is_row_major_blanks() {
        assert_eq!(sudoku_fill_order(&[1, 0, 0, 2, 0]), vec![1, 2, 4]);
    }
}
