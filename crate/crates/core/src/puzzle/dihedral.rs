use crate::error::{Error, Result};

pub const DIHEDRAL_ORDER: u8 = 8;

/// Applies element `e` of the square's symmetry group to a row-major
/// `side×side` grid: a clockwise rotation by `90°·(e mod 4)`, then a
/// left-right reflection when `e >= 4`.
pub fn dihedral_transform<T: Clone>(grid: &[T], rows: usize, cols: usize, e: u8) -> Result<Vec<T>> {
    if rows != cols {
        return Err(Error::Puzzle(format!(
            "dihedral transform needs a square grid, got {rows}x{cols}"
        )));
    }
    if e >= DIHEDRAL_ORDER {
        return Err(Error::Puzzle(format!("dihedral element {e} out of range")));
    }
    if grid.len() != rows * cols {
        return Err(Error::Puzzle("grid size does not match dimensions".into()));
    }
    let n = rows;
    let mut cur = grid.to_vec();
    for _ in 0..e % 4 {
        let mut next = cur.clone();
        for i in 0..n {
            for j in 0..n {
                next[i * n + j] = cur[(n - 1 - j) * n + i].clone();
            }
        }
        cur = next;
    }
    if e >= 4 {
        for row in cur.chunks_mut(n) {
            row.reverse();
        }
    }
    Ok(cur)
}

/// Composition `a` then `b`, found by brute force on a labelled grid.
pub fn dihedral_compose_brute(a: u8, b: u8) -> Option<u8> {
    let n = 3;
    let labels: Vec<usize> = (0..n * n).collect();
    let ab = dihedral_transform(&dihedral_transform(&labels, n, n, a).ok()?, n, n, b).ok()?;
    (0..DIHEDRAL_ORDER).find(|&c| dihedral_transform(&labels, n, n, c).ok().as_ref() == Some(&ab))
}
