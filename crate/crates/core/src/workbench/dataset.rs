//! Binary dataset file for a generated task suite.
//!
//! ```text
//! magic "MLDS" | version u32 | config_len u32 | config JSON
//! task_count u32
//! per task: id u32 | kind u8 (0 class, 1 regression) | out_dim u32 | train split | test split
//! split: n u32 | d u32 | inputs n·d f64 | labels (n u32, or n·out_dim f64)
//! ```

use std::fs;
use std::path::Path;

use crate::linalg::Matrix;
use crate::nn::TaskId;
use crate::taskgen::{Labels, Split, SuiteConfig, TaskData, TaskKind, TaskSuite};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLDS";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_split(out: &mut Vec<u8>, s: &Split) {
    put_u32(out, s.inputs.rows());
    put_u32(out, s.inputs.cols());
    put_f64s(out, s.inputs.as_slice());
    match &s.labels {
        Labels::Classes(c) => c.iter().for_each(|&l| put_u32(out, l)),
        Labels::Values(v) => put_f64s(out, v.as_slice()),
    }
}

pub fn encode_suite(suite: &TaskSuite) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    let cfg = serde_json::to_vec(&suite.config)?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put_u32(&mut out, suite.tasks.len());
    for t in &suite.tasks {
        put_u32(&mut out, t.id.0 as usize);
        out.push(if t.kind.is_classification() { 0 } else { 1 });
        put_u32(&mut out, t.kind.output_dim());
        put_split(&mut out, &t.train);
        put_split(&mut out, &t.test);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated dataset".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn split(&mut self, kind: TaskKind) -> Result<Split> {
        let n = self.u32()?;
        let d = self.u32()?;
        let inputs = Matrix::from_vec(n, d, self.f64s(n * d)?)?;
        let labels = match kind {
            TaskKind::Classification { .. } => {
                Labels::Classes((0..n).map(|_| self.u32()).collect::<Result<_>>()?)
            }
            TaskKind::Regression { dim } => {
                Labels::Values(Matrix::from_vec(n, dim, self.f64s(n * dim)?)?)
            }
        };
        Split::new(inputs, labels)
    }
}

pub fn decode_suite(bytes: &[u8]) -> Result<TaskSuite> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "dataset version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let len = r.u32()?;
    let config: SuiteConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut tasks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let id = TaskId(r.u32()? as u32);
        let tag = r.take(1)?[0];
        let dim = r.u32()?;
        let kind = match tag {
            0 => TaskKind::Classification { classes: dim },
            1 => TaskKind::Regression { dim },
            _ => return Err(Error::Format(format!("unknown task kind tag {tag}"))),
        };
        let train = r.split(kind)?;
        let test = r.split(kind)?;
        tasks.push(TaskData {
            id,
            kind,
            train,
            test,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(TaskSuite { config, tasks })
}

pub fn save_suite(suite: &TaskSuite, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_suite(suite)?)?)
}

pub fn load_suite(path: &Path) -> Result<TaskSuite> {
    decode_suite(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::gen_suite;

    #[test]
    fn round_trip() {
        let cfg = SuiteConfig {
            tasks: 3,
            regression_tasks: 1,
            train_per_task: 20,
            test_per_task: 10,
            ..SuiteConfig::default()
        };
        let suite = gen_suite(&cfg).unwrap();
        let bytes = encode_suite(&suite).unwrap();
        assert_eq!(decode_suite(&bytes).unwrap(), suite);
        assert!(decode_suite(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_suite(&extra).is_err());
    }
}
