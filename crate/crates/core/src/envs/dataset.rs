//! Expert episode generation and the binary episode file.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then one record per episode. A record is `u32` goal, `u8` mode,
//! `u8` success flag and the arrays (per-camera images, proprio, actions).
//! Each array is a `u32` rank, `u32` dims and little-endian `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, Mode, Task, CAMERAS, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DBEPISOD";
pub const DATASET_VERSION: u32 = 1;

/// Per-dimension min/max used to map proprio and actions to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub proprio_min: Vec<f32>,
    pub proprio_max: Vec<f32>,
    pub action_min: Vec<f32>,
    pub action_max: Vec<f32>,
}

fn half_range(lo: f32, hi: f32) -> f32 {
    let h = 0.5 * (hi - lo);
    if h < 1e-6 {
        1.0
    } else {
        h
    }
}

fn to_unit(x: &[f32], lo: &[f32], hi: &[f32]) -> Vec<f32> {
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % lo.len();
            (v - 0.5 * (lo[j] + hi[j])) / half_range(lo[j], hi[j])
        })
        .collect()
}

fn from_unit(x: &[f32], lo: &[f32], hi: &[f32]) -> Vec<f32> {
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % lo.len();
            v * half_range(lo[j], hi[j]) + 0.5 * (lo[j] + hi[j])
        })
        .collect()
}

impl NormStats {
    /// Identity normalisation for `p` proprio and `a` action dimensions.
    pub fn identity(p: usize, a: usize) -> Self {
        NormStats {
            proprio_min: vec![-1.0; p],
            proprio_max: vec![1.0; p],
            action_min: vec![-1.0; a],
            action_max: vec![1.0; a],
        }
    }

    /// Rows of any length that is a multiple of the proprio width.
    pub fn normalize_proprio(&self, x: &[f32]) -> Vec<f32> {
        to_unit(x, &self.proprio_min, &self.proprio_max)
    }

    pub fn normalize_actions(&self, x: &[f32]) -> Vec<f32> {
        to_unit(x, &self.action_min, &self.action_max)
    }

    pub fn denormalize_actions(&self, x: &[f32]) -> Vec<f32> {
        from_unit(x, &self.action_min, &self.action_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: Task,
    pub n_episodes: usize,
    pub cameras: usize,
    pub image_size: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    pub stats: NormStats,
}

/// One demonstration; arrays are time-major with `len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub goal: usize,
    pub mode: Option<Mode>,
    pub success: bool,
    pub len: usize,
    /// Per camera, `len × size × size × 3`.
    pub images: Vec<Vec<f32>>,
    pub proprio: Vec<f32>,
    pub actions: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

fn record_episode(task: Task, seed: u64, goal: usize, mode: Mode) -> Result<Episode> {
    let mut env = Env::reset(task, seed, goal)?;
    let mut images = vec![Vec::new(); CAMERAS];
    let (mut proprio, mut actions) = (Vec::new(), Vec::new());
    let mut len = 0;
    while !env.done() {
        let obs = env.observe();
        for (dst, src) in images.iter_mut().zip(&obs.images) {
            dst.extend_from_slice(src);
        }
        proprio.extend_from_slice(&obs.proprio);
        let a = env.expert_action(mode);
        actions.extend(a.iter().map(|&v| v as f32));
        env.step(&a)?;
        len += 1;
    }
    let mode = (task == Task::Fork2d).then_some(mode);
    Ok(Episode { goal, mode, success: env.success(), len, images, proprio, actions })
}

fn min_max(rows: impl Iterator<Item = f32>, width: usize) -> (Vec<f32>, Vec<f32>) {
    let mut lo = vec![f32::INFINITY; width];
    let mut hi = vec![f32::NEG_INFINITY; width];
    for (i, v) in rows.enumerate() {
        lo[i % width] = lo[i % width].min(v);
        hi[i % width] = hi[i % width].max(v);
    }
    (lo, hi)
}

/// Records `n` expert episodes. Episode `i` uses env seed `seed + i`; fork2d
/// modes and pickplace goals are balanced, then shuffled.
pub fn generate_dataset(task: Task, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes: Vec<Mode> = (0..n).map(|i| if i % 2 == 0 { Mode::Left } else { Mode::Right }).collect();
    let mut goals: Vec<usize> = (0..n).map(|i| i % task.goal_vocab()).collect();
    modes.shuffle(&mut rng);
    goals.shuffle(&mut rng);
    let episodes = (0..n)
        .map(|i| record_episode(task, seed.wrapping_add(i as u64), goals[i], modes[i]))
        .collect::<Result<Vec<_>>>()?;
    let (p, a) = (task.proprio_dim(), task.action_dim());
    let (proprio_min, proprio_max) = min_max(episodes.iter().flat_map(|e| e.proprio.iter().copied()), p);
    let (action_min, action_max) = min_max(episodes.iter().flat_map(|e| e.actions.iter().copied()), a);
    let header = DatasetHeader {
        version: DATASET_VERSION,
        task,
        n_episodes: n,
        cameras: CAMERAS,
        image_size: IMAGE_SIZE,
        proprio_dim: p,
        action_dim: a,
        seed,
        stats: NormStats { proprio_min, proprio_max, action_min, action_max },
    };
    Ok(Dataset { header, episodes })
}

fn put_array(out: &mut Vec<u8>, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader over an in-memory file.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader { buf, at: 0, path: path.to_path_buf() }
    }

    pub(crate) fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), msg: msg.into() }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(self.fail(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| self.fail("array too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn array(&mut self, want: &[usize]) -> Result<Vec<f32>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want {
            return Err(self.fail(format!("array shape {shape:?}, expected {want:?}")));
        }
        self.f32s(shape.iter().product())
    }

    pub(crate) fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn task(&self) -> Task {
        self.header.task
    }

    pub fn stats(&self) -> &NormStats {
        &self.header.stats
    }

    /// Total number of recorded steps.
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let json = serde_json::to_vec(h).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let s = h.image_size;
        for e in &self.episodes {
            out.extend_from_slice(&(e.goal as u32).to_le_bytes());
            out.push(match e.mode {
                None => 0,
                Some(Mode::Left) => 1,
                Some(Mode::Right) => 2,
            });
            out.push(e.success as u8);
            out.extend_from_slice(&(e.len as u32).to_le_bytes());
            for cam in &e.images {
                put_array(&mut out, &[e.len, s, s, 3], cam);
            }
            put_array(&mut out, &[e.len, h.proprio_dim], &e.proprio);
            put_array(&mut out, &[e.len, h.action_dim], &e.actions);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, path);
        if r.bytes(8)? != DATASET_MAGIC {
            return Err(r.fail("not an episode file"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: DatasetHeader =
            serde_json::from_slice(r.bytes(len)?).map_err(|e| r.fail(format!("header: {e}")))?;
        let s = header.image_size;
        let mut episodes = Vec::with_capacity(header.n_episodes);
        for _ in 0..header.n_episodes {
            let goal = r.u32()? as usize;
            let mode = match r.u8()? {
                0 => None,
                1 => Some(Mode::Left),
                2 => Some(Mode::Right),
                m => return Err(r.fail(format!("bad mode tag {m}"))),
            };
            let success = r.u8()? != 0;
            let len = r.u32()? as usize;
            let images =
                (0..header.cameras).map(|_| r.array(&[len, s, s, 3])).collect::<Result<Vec<_>>>()?;
            let proprio = r.array(&[len, header.proprio_dim])?;
            let actions = r.array(&[len, header.action_dim])?;
            episodes.push(Episode { goal, mode, success, len, images, proprio, actions });
        }
        if !r.done() {
            return Err(r.fail("trailing bytes after last episode"));
        }
        Ok(Dataset { header, episodes })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
