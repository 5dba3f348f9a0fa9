use std::fmt::Write as _;
use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{check_dim, Error, Result};
use crate::nn::{read_f64s, read_u32, read_u64};

const DATASET_MAGIC: &[u8; 4] = b"VQDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub policy: String,
    pub seed: u64,
    /// Highest undiscounted return of any trajectory in the dataset.
    pub best_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub transitions: Vec<Transition>,
}

/// Column-major views of a dataset, one row per transition.
#[derive(Debug, Clone)]
pub struct DatasetArrays {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<f64>,
}

impl OfflineDataset {
    pub fn new(meta: DatasetMeta, transitions: Vec<Transition>) -> Result<Self> {
        let ds = Self { meta, transitions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.transitions {
            check_dim("transition state", self.meta.state_dim, t.state.len())?;
            check_dim("transition next state", self.meta.state_dim, t.next_state.len())?;
            check_dim("transition action", self.meta.action_dim, t.action.len())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn arrays(&self) -> DatasetArrays {
        let n = self.len();
        let (sd, ad) = (self.meta.state_dim, self.meta.action_dim);
        let states = Array2::from_shape_fn((n, sd), |(i, j)| self.transitions[i].state[j]);
        let actions = Array2::from_shape_fn((n, ad), |(i, j)| self.transitions[i].action[j]);
        let next_states = Array2::from_shape_fn((n, sd), |(i, j)| self.transitions[i].next_state[j]);
        DatasetArrays {
            states,
            actions,
            rewards: self.transitions.iter().map(|t| t.reward).collect(),
            next_states,
            dones: self.transitions.iter().map(|t| f64::from(u8::from(t.done))).collect(),
        }
    }

    /// Header (magic, version, env id, dims, seed, policy tag, best return,
    /// record count) followed by packed little-endian f64 records
    /// `(s, a, r, s', done)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        write_str(w, &self.meta.env_id)?;
        w.write_all(&(self.meta.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.meta.action_dim as u32).to_le_bytes())?;
        w.write_all(&self.meta.seed.to_le_bytes())?;
        write_str(w, &self.meta.policy)?;
        w.write_all(&self.meta.best_return.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.record_width() * 8 * self.len());
        for t in &self.transitions {
            for v in t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .chain(&t.next_state)
            {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&f64::from(u8::from(t.done)).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    fn record_width(&self) -> usize {
        2 * self.meta.state_dim + self.meta.action_dim + 2
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let env_id = read_str(r)?;
        let state_dim = read_u32(r)? as usize;
        let action_dim = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let policy = read_str(r)?;
        let best_return = f64::from_le_bytes(read_u64(r)?.to_le_bytes());
        let count = read_u64(r)? as usize;
        if state_dim == 0 || action_dim == 0 || state_dim > 1 << 16 || action_dim > 1 << 16 {
            return Err(Error::Format("implausible dataset dims".into()));
        }
        let meta = DatasetMeta {
            env_id,
            state_dim,
            action_dim,
            policy,
            seed,
            best_return,
        };
        let width = 2 * state_dim + action_dim + 2;
        let mut transitions = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let rec = read_f64s(r, width)?;
            let (s, rest) = rec.split_at(state_dim);
            let (a, rest) = rest.split_at(action_dim);
            let (rw, rest) = rest.split_at(1);
            let (ns, done) = rest.split_at(state_dim);
            transitions.push(Transition {
                state: s.to_vec(),
                action: a.to_vec(),
                reward: rw[0],
                next_state: ns.to_vec(),
                done: done[0] != 0.0,
            });
        }
        Self::new(meta, transitions)
    }

    /// Human-readable mirror of the binary file.
    pub fn to_csv(&self) -> String {
        let (sd, ad) = (self.meta.state_dim, self.meta.action_dim);
        let mut out = String::new();
        let mut header: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
        header.extend((0..ad).map(|i| format!("a{i}")));
        header.push("r".into());
        header.extend((0..sd).map(|i| format!("next_s{i}")));
        header.push("done".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for t in &self.transitions {
            let mut fields: Vec<String> = t.state.iter().map(|v| v.to_string()).collect();
            fields.extend(t.action.iter().map(|v| v.to_string()));
            fields.push(t.reward.to_string());
            fields.extend(t.next_state.iter().map(|v| v.to_string()));
            fields.push(u8::from(t.done).to_string());
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Undiscounted return of each trajectory, split at `done` flags and at
/// breaks where a state does not continue from the previous next-state.
pub fn trajectory_returns(transitions: &[Transition]) -> Vec<f64> {
    let mut returns = Vec::new();
    let mut acc = 0.0;
    let mut open = false;
    for (i, t) in transitions.iter().enumerate() {
        if open && i > 0 && transitions[i - 1].next_state != t.state {
            returns.push(acc);
            acc = 0.0;
        }
        acc += t.reward;
        open = true;
        if t.done {
            returns.push(acc);
            acc = 0.0;
            open = false;
        }
    }
    if open {
        returns.push(acc);
    }
    returns
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> OfflineDataset {
        let meta = DatasetMeta {
            env_id: "test".into(),
            state_dim: 2,
            action_dim: 1,
            policy: "random".into(),
            seed: 9,
            best_return: 1.5,
        };
        let transitions = vec![
            Transition { state: vec![0.0, 1.0], action: vec![0.5], reward: 1.0, next_state: vec![1.0, 1.0], done: false },
            Transition { state: vec![1.0, 1.0], action: vec![-0.5], reward: 0.5, next_state: vec![2.0, 1.0], done: true },
        ];
        OfflineDataset::new(meta, transitions).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(OfflineDataset::read_from(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut ds = sample();
        ds.transitions[0].action.push(1.0);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "s0,s1,a0,r,next_s0,next_s1,done");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn returns_split_on_done() {
        assert_eq!(trajectory_returns(&sample().transitions), vec![1.5]);
    }
}
