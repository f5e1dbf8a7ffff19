//! Transition records, offline datasets and their on-disk formats.
//!
//! # Text format
//!
//! ```text
//! riskmbrl-dataset v1 state_dim=<S> action_dim=<A> count=<N> env=<id> seed=<seed>
//! <s_1> .. <s_S> <a_1> .. <a_A> <reward> <s'_1> .. <s'_S> <terminal 0|1>
//! ...
//! ```
//!
//! Every real is written in scientific notation with 17 significant digits,
//! which round-trips `f64` exactly.
//!
//! # Binary format (little endian)
//!
//! `b"RMBD"`, `u32` version (1), `u32` state_dim, `u32` action_dim,
//! `u64` count, `u64` seed, `u32` env-id length followed by the UTF-8 id,
//! then per record `S + A + 1 + S` `f64`s and one `u8` terminal flag.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(s, a, r, s', done)` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl TransitionRecord {
    fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().chain(&self.action).chain(&self.next_state).all(|v| v.is_finite())
    }
}

/// A fixed collection of transitions with consistent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    records: Vec<TransitionRecord>,
    state_dim: usize,
    action_dim: usize,
    pub env_id: String,
    pub seed: u64,
}

impl OfflineDataset {
    pub fn new(records: Vec<TransitionRecord>, state_dim: usize, action_dim: usize) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.state.len() != state_dim || r.next_state.len() != state_dim || r.action.len() != action_dim {
                return Err(Error::ShapeMismatch(format!("record {i} has inconsistent dimensions")));
            }
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("record {i}")));
            }
        }
        Ok(Self {
            records,
            state_dim,
            action_dim,
            env_id: String::from("unknown"),
            seed: 0,
        })
    }

    pub fn with_origin(mut self, env_id: &str, seed: u64) -> Self {
        self.env_id = env_id.to_string();
        self.seed = seed;
        self
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// All states as a `(len, state_dim)` matrix.
    pub fn states(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.state_dim), |(i, j)| self.records[i].state[j])
    }

    /// Writes the text format, or the binary one when the path ends in `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "bin") {
            self.save_binary(path)
        } else {
            self.save_text(path)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "bin") {
            Self::load_binary(path)
        } else {
            Self::load_text(path)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "riskmbrl-dataset v1 state_dim={} action_dim={} count={} env={} seed={}\n",
            self.state_dim,
            self.action_dim,
            self.len(),
            self.env_id,
            self.seed
        );
        for r in &self.records {
            let nums = r.state.iter().chain(&r.action).chain(std::iter::once(&r.reward)).chain(&r.next_state);
            for v in nums {
                out.push_str(&format!("{v:.16e} "));
            }
            out.push(if r.terminal { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_text().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("riskmbrl-dataset") || parts.next() != Some("v1") {
            return Err(Error::Format(format!("bad dataset header `{header}`")));
        }
        let mut field = |name: &str| -> Result<String> {
            let p = parts.next().ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
            p.strip_prefix(&format!("{name}="))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected `{name}=`, got `{p}`")))
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer `{s}`")));
        let state_dim = parse_usize(field("state_dim")?)?;
        let action_dim = parse_usize(field("action_dim")?)?;
        let count = parse_usize(field("count")?)?;
        let env_id = field("env")?;
        let seed = field("seed")?
            .parse::<u64>()
            .map_err(|_| Error::Format("bad seed".into()))?;
        let width = 2 * state_dim + action_dim + 2;
        let mut records = Vec::with_capacity(count);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != width {
                return Err(Error::Format(format!("line {} has {} fields, expected {width}", lineno + 2, toks.len())));
            }
            let nums: Vec<f64> = toks[..width - 1]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            let terminal = match toks[width - 1] {
                "0" => false,
                "1" => true,
                t => return Err(Error::Format(format!("bad terminal flag `{t}`"))),
            };
            records.push(split_record(&nums, state_dim, action_dim, terminal));
        }
        if records.len() != count {
            return Err(Error::Format(format!("header says {count} records, found {}", records.len())));
        }
        Ok(Self::new(records, state_dim, action_dim)?.with_origin(&env_id, seed))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(b"RMBD")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.env_id.len() as u32).to_le_bytes())?;
        w.write_all(self.env_id.as_bytes())?;
        for r in &self.records {
            for v in r.state.iter().chain(&r.action).chain(std::iter::once(&r.reward)).chain(&r.next_state) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[u8::from(r.terminal)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RMBD" {
            return Err(Error::Format("not a binary dataset".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let state_dim = read_u32(&mut r)? as usize;
        let action_dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let env_id = String::from_utf8(id).map_err(|_| Error::Format("env id is not UTF-8".into()))?;
        let width = 2 * state_dim + action_dim + 1;
        let mut records = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let mut nums = Vec::with_capacity(width);
            for _ in 0..width {
                r.read_exact(&mut buf)?;
                nums.push(f64::from_le_bytes(buf));
            }
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            records.push(split_record(&nums, state_dim, action_dim, flag[0] != 0));
        }
        Ok(Self::new(records, state_dim, action_dim)?.with_origin(&env_id, seed))
    }
}

fn split_record(nums: &[f64], s: usize, a: usize, terminal: bool) -> TransitionRecord {
    TransitionRecord {
        state: nums[..s].to_vec(),
        action: nums[s..s + a].to_vec(),
        reward: nums[s + a],
        next_state: nums[s + a + 1..2 * s + a + 1].to_vec(),
        terminal,
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Per-dimension standardisation `(x − mean)/std`. Dimensions whose std is
/// below 1e-8 pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const DEGENERATE_STD: f64 = 1e-8;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean/std of the rows of `data`.
    pub fn fit(data: &Array2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let dim = data.ncols();
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        for j in 0..dim {
            let col = data.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if s < DEGENERATE_STD {
                mean[j] = 0.0;
                std[j] = 1.0;
            } else {
                mean[j] = m;
                std[j] = s;
            }
        }
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_dataset(n: usize, seed: u64) -> OfflineDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| TransitionRecord {
                state: vec![rng.random::<f64>() * 1e3, -rng.random::<f64>() / 7.0],
                action: vec![rng.random_range(-1.0..1.0)],
                reward: rng.random::<f64>() * std::f64::consts::PI,
                next_state: vec![rng.random(), 1e-300 * rng.random::<f64>()],
                terminal: i % 3 == 0,
            })
            .collect();
        OfflineDataset::new(records, 2, 1).unwrap().with_origin("test", seed)
    }

    #[test]
    fn text_and_binary_round_trips_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample_dataset(50, 4);
        for name in ["d.txt", "d.bin"] {
            let p = dir.path().join(name);
            d.save(&p).unwrap();
            assert_eq!(OfflineDataset::load(&p).unwrap(), d);
        }
    }

    #[test]
    fn rejects_inconsistent_records() {
        let mut d = sample_dataset(3, 1).records().to_vec();
        d[1].action.push(0.0);
        assert!(OfflineDataset::new(d, 2, 1).is_err());
        let mut d = sample_dataset(3, 1).records().to_vec();
        d[2].reward = f64::NAN;
        assert!(OfflineDataset::new(d, 2, 1).is_err());
    }

    #[test]
    fn rejects_truncated_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let text = sample_dataset(5, 2).to_text();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&p, truncated.join("\n")).unwrap();
        assert!(matches!(OfflineDataset::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn normalizer_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Array2::from_shape_fn((500, 3), |(_, j)| if j == 2 { 4.0 } else { rng.random::<f64>() * 10.0 });
        let norm = Normalizer::fit(&raw);
        // constant dimension passes through
        assert_eq!((norm.mean[2], norm.std[2]), (0.0, 1.0));
        let z = norm.apply(&raw);
        let renorm = Normalizer::fit(&z);
        for j in 0..2 {
            assert!(renorm.mean[j].abs() < 1e-6 && (renorm.std[j] - 1.0).abs() < 1e-6);
        }
        let again = renorm.apply(&z);
        for (a, b) in again.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let back = norm.invert(&z);
        for (a, b) in back.iter().zip(raw.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
