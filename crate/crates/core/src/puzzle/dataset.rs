use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, dihedral_transform, gen_maze, gen_sudoku, maze_path_order, sudoku_fill_order,
    PuzzleInstance, PuzzleType, SudokuSize, VocabSpec,
};
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "puzzlegen-1";

const MAX_DEDUP_ATTEMPTS: u64 = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    /// Unique base puzzles generated; whatever is not val or golden is train.
    pub count: usize,
    pub val: usize,
    pub golden: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Copies per training puzzle; the first copy is the raw puzzle.
    pub augmentation: usize,
    pub sudoku4: TypeCounts,
    pub sudoku6: TypeCounts,
    pub maze: TypeCounts,
    pub sudoku4_givens: (usize, usize),
    pub sudoku6_givens: (usize, usize),
    pub maze_rows: usize,
    pub maze_cols: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            augmentation: 1,
            sudoku4: TypeCounts::default(),
            sudoku6: TypeCounts::default(),
            maze: TypeCounts::default(),
            sudoku4_givens: (4, 8),
            sudoku6_givens: (8, 20),
            maze_rows: 7,
            maze_cols: 7,
        }
    }
}

impl DatasetSpec {
    pub fn counts(&self, t: PuzzleType) -> TypeCounts {
        match t {
            PuzzleType::Sudoku4 => self.sudoku4,
            PuzzleType::Sudoku6 => self.sudoku6,
            PuzzleType::Maze => self.maze,
        }
    }

    fn cells(&self, t: PuzzleType) -> usize {
        match t {
            PuzzleType::Sudoku4 => 16,
            PuzzleType::Sudoku6 => 36,
            PuzzleType::Maze => self.maze_rows * self.maze_cols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.augmentation == 0 {
            return Err(Error::Config(
                "augmentation factor must be at least 1".into(),
            ));
        }
        let mut any = false;
        for t in PuzzleType::ALL {
            let c = self.counts(t);
            if c.count < c.val + c.golden {
                return Err(Error::Config(format!(
                    "{}: count {} is smaller than val {} + golden {}",
                    t.name(),
                    c.count,
                    c.val,
                    c.golden
                )));
            }
            any |= c.count > 0;
        }
        if !any {
            return Err(Error::Config("dataset spec requests no puzzles".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        PuzzleType::ALL
            .into_iter()
            .filter(|&t| self.counts(t).count > 0)
            .map(|t| self.cells(t))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub golden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub vocab: VocabSpec,
    pub seq_len: usize,
    pub seed: u64,
    pub splits: SplitSizes,
    pub spec: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<PuzzleInstance>,
    pub val: Vec<PuzzleInstance>,
    pub golden: Vec<PuzzleInstance>,
}

/// Group elements that keep a puzzle family valid. 6×6 boxes are 2×3, so
/// only the elements that keep rows as rows survive.
fn symmetry_elements(inst: &PuzzleInstance) -> &'static [u8] {
    match inst.puzzle_type {
        PuzzleType::Sudoku6 => &[0, 2, 4, 6],
        _ if inst.rows != inst.cols => &[0],
        _ => &[0, 1, 2, 3, 4, 5, 6, 7],
    }
}

fn transform_instance(inst: &PuzzleInstance, e: u8) -> Result<PuzzleInstance> {
    if e == 0 {
        return Ok(inst.clone());
    }
    let n = inst.cells();
    let mut out = inst.clone();
    out.x[..n].copy_from_slice(&dihedral_transform(&inst.x[..n], inst.rows, inst.cols, e)?);
    out.y[..n].copy_from_slice(&dihedral_transform(&inst.y[..n], inst.rows, inst.cols, e)?);
    Ok(out)
}

/// Smallest input grid over the family's symmetry group, tagged by type.
pub fn canonical_key(inst: &PuzzleInstance) -> Result<(PuzzleType, Vec<u32>)> {
    let n = inst.cells();
    let mut best: Option<Vec<u32>> = None;
    for &e in symmetry_elements(inst) {
        let g = if e == 0 {
            inst.x[..n].to_vec()
        } else {
            dihedral_transform(&inst.x[..n], inst.rows, inst.cols, e)?
        };
        if best.as_ref().is_none_or(|b| g < *b) {
            best = Some(g);
        }
    }
    Ok((inst.puzzle_type, best.unwrap_or_default()))
}

/// Reveals a uniformly random prefix of the solver's fill order in `x`;
/// `y` is untouched.
pub fn trajectory_sample<R: Rng>(
    inst: &PuzzleInstance,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    let n = inst.cells();
    let (order, reveal_path) = match inst.puzzle_type {
        PuzzleType::Maze => (maze_path_order(inst, vocab)?, true),
        _ => {
            let grid: Vec<u8> = inst.x[..n]
                .iter()
                .map(|&t| u8::from(t != vocab.blank))
                .collect();
            (sudoku_fill_order(&grid), false)
        }
    };
    let k = rng.random_range(0..=order.len());
    let mut out = inst.clone();
    for &i in &order[..k] {
        out.x[i] = if reveal_path { vocab.path } else { inst.y[i] };
    }
    Ok(out)
}

/// Copy `copy` of a training puzzle: copy 0 is the puzzle itself, later
/// copies get a trajectory prefix and a random symmetry.
pub fn augment<R: Rng>(
    inst: &PuzzleInstance,
    copy: usize,
    vocab: &VocabSpec,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    if copy == 0 {
        return Ok(inst.clone());
    }
    let sampled = trajectory_sample(inst, vocab, rng)?;
    let elems = symmetry_elements(inst);
    let e = elems[rng.random_range(0..elems.len())];
    let mut out = transform_instance(&sampled, e)?;
    out.id = format!("{}/a{copy}", inst.id);
    Ok(out)
}

fn generate_one(
    spec: &DatasetSpec,
    vocab: &VocabSpec,
    t: PuzzleType,
    index: usize,
    attempt: u64,
) -> Result<PuzzleInstance> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, t.tag(), index as u64, attempt]));
    let id = format!("{}-s{}-{index:06}", t.name(), spec.seed);
    match t {
        PuzzleType::Sudoku4 => {
            gen_sudoku(SudokuSize::FOUR, spec.sudoku4_givens, id, vocab, &mut rng)
        }
        PuzzleType::Sudoku6 => {
            gen_sudoku(SudokuSize::SIX, spec.sudoku6_givens, id, vocab, &mut rng)
        }
        PuzzleType::Maze => gen_maze(spec.maze_rows, spec.maze_cols, id, vocab, &mut rng),
    }
}

fn generate_unique(
    spec: &DatasetSpec,
    vocab: &VocabSpec,
    t: PuzzleType,
) -> Result<Vec<PuzzleInstance>> {
    let count = spec.counts(t).count;
    let first: Vec<PuzzleInstance> = (0..count)
        .into_par_iter()
        .map(|i| generate_one(spec, vocab, t, i, 0))
        .collect::<Result<_>>()?;
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    for (i, mut inst) in first.into_iter().enumerate() {
        let mut attempt = 0;
        while !seen.insert(canonical_key(&inst)?) {
            attempt += 1;
            if attempt > MAX_DEDUP_ATTEMPTS {
                return Err(Error::Puzzle(format!(
                    "{}: could not find {count} distinct puzzles",
                    t.name()
                )));
            }
            inst = generate_one(spec, vocab, t, i, attempt)?;
        }
        out.push(inst);
    }
    Ok(out)
}

/// Generates, deduplicates, splits, augments and pads a dataset. Val and
/// golden puzzles are never augmented.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = VocabSpec::default();
    let seq_len = spec.seq_len();
    let (mut train, mut val, mut golden) = (Vec::new(), Vec::new(), Vec::new());
    for t in PuzzleType::ALL {
        let c = spec.counts(t);
        if c.count == 0 {
            continue;
        }
        let base = generate_unique(spec, &vocab, t)?;
        let mut it = base.into_iter();
        val.extend(it.by_ref().take(c.val));
        golden.extend(it.by_ref().take(c.golden));
        let rest: Vec<PuzzleInstance> = it.collect();
        let augmented: Vec<PuzzleInstance> = rest
            .par_iter()
            .enumerate()
            .flat_map_iter(|(i, inst)| {
                let vocab = &vocab;
                (0..spec.augmentation).map(move |copy| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        spec.seed,
                        0xA06,
                        t.tag(),
                        i as u64,
                        copy as u64,
                    ]));
                    augment(inst, copy, vocab, &mut rng)
                })
            })
            .collect::<Result<_>>()?;
        train.extend(augmented);
    }
    let pad = |v: Vec<PuzzleInstance>| -> Result<Vec<PuzzleInstance>> {
        v.into_iter()
            .map(|p| p.padded(seq_len, vocab.pad))
            .collect()
    };
    let (train, val, golden) = (pad(train)?, pad(val)?, pad(golden)?);
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.into(),
        vocab,
        seq_len,
        seed: spec.seed,
        splits: SplitSizes {
            train: train.len(),
            val: val.len(),
            golden: golden.len(),
        },
        spec: spec.clone(),
    };
    Ok(Dataset {
        manifest,
        train,
        val,
        golden,
    })
}

fn write_split(path: &Path, items: &[PuzzleInstance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_split(&dir.join("train.jsonl"), &data.train)?;
    write_split(&dir.join("val.jsonl"), &data.val)?;
    write_split(&dir.join("golden.jsonl"), &data.golden)?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<PuzzleInstance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Puzzle(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let data = Dataset {
        train: read_split(&dir.join("train.jsonl"))?,
        val: read_split(&dir.join("val.jsonl"))?,
        golden: read_split(&dir.join("golden.jsonl"))?,
        manifest,
    };
    for item in data.train.iter().chain(&data.val).chain(&data.golden) {
        if item.seq_len() != data.manifest.seq_len {
            return Err(Error::Puzzle(format!(
                "{}: length {} differs from manifest {}",
                item.id,
                item.seq_len(),
                data.manifest.seq_len
            )));
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            seed: 11,
            augmentation: 3,
            sudoku4: TypeCounts {
                count: 30,
                val: 5,
                golden: 5,
            },
            maze: TypeCounts {
                count: 6,
                val: 1,
                golden: 1,
            },
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn splits_and_padding() {
        let d = build_dataset(&small_spec()).unwrap();
        assert_eq!(d.manifest.seq_len, 49);
        assert_eq!(d.val.len(), 6);
        assert_eq!(d.golden.len(), 6);
        assert_eq!(d.train.len(), (20 + 4) * 3);
        let v = VocabSpec::default();
        for p in d.train.iter().chain(&d.val).chain(&d.golden) {
            assert_eq!(p.seq_len(), 49);
            p.validate(&v).unwrap();
        }
    }

    #[test]
    fn held_out_puzzles_are_disjoint_from_train() {
        let d = build_dataset(&small_spec()).unwrap();
        let train: HashSet<_> = d.train.iter().map(|p| canonical_key(p).unwrap()).collect();
        for p in d.val.iter().chain(&d.golden) {
            assert!(!train.contains(&canonical_key(p).unwrap()));
        }
    }

    #[test]
    fn first_copy_is_raw() {
        let d = build_dataset(&small_spec()).unwrap();
        assert!(!d.train[0].id.contains("/a"));
        assert!(d.train[1].id.ends_with("/a1"));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(
            build_dataset(&small_spec()).unwrap(),
            build_dataset(&small_spec()).unwrap()
        );
    }

    #[test]
    fn bad_specs_are_config_errors() {
        let mut s = small_spec();
        s.augmentation = 0;
        assert!(build_dataset(&s).unwrap_err().is_config());
        let mut s = small_spec();
        s.sudoku4.val = 40;
        assert!(build_dataset(&s).unwrap_err().is_config());
    }

    #[test]
    fn trajectory_sample_keeps_target() {
        let v = VocabSpec::default();
        let d = build_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in &d.val {
            for _ in 0..10 {
                let s = trajectory_sample(p, &v, &mut rng).unwrap();
                assert_eq!(s.y, p.y);
                s.validate(&v).unwrap();
            }
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let d = build_dataset(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }
}
