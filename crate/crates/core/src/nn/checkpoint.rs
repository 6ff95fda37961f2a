//! Checkpoint directories: `manifest.txt` (text) plus `params.bin`
//! (little-endian `f32`, concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sonotag_tensor::Tensor;

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::optim::{Moments, ParamState};

const MAGIC: &str = "sonotag-checkpoint 1";
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";

/// Saved model, training progress and (optionally) optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub metrics: BTreeMap<String, f64>,
    pub taxonomy_hash: String,
    pub optimizer: Option<(u64, BTreeMap<String, ParamState<f32>>)>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Writes `dir/manifest.txt` and `dir/params.bin`, replacing any
    /// previous checkpoint in `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        if let Some((_, states)) = &self.optimizer {
            for (name, st) in states {
                let shape = self.params.get(name)?.shape().to_vec();
                entries.push((format!("optim.m.{name}"), shape.clone(), st.moments.m.clone()));
                entries.push((format!("optim.v.{name}"), shape.clone(), st.moments.v.clone()));
                entries.push((format!("optim.slow.{name}"), shape, st.slow.clone()));
            }
        }

        let mut manifest = format!("{MAGIC}\nstep {}\nepoch {}\ntaxonomy {}\n", self.step, self.epoch, self.taxonomy_hash);
        for (k, v) in &self.metrics {
            if k.contains(char::is_whitespace) {
                return Err(bad(dir, format!("metric name {k:?} contains whitespace")));
            }
            manifest.push_str(&format!("metric {k} {v:?}\n"));
        }
        let toml = toml::to_string(&self.model).map_err(|e| bad(dir, format!("config: {e}")))?;
        for line in toml.lines().filter(|l| !l.trim().is_empty()) {
            manifest.push_str(&format!("config {line}\n"));
        }
        if let Some((step, _)) = &self.optimizer {
            manifest.push_str(&format!("optimizer {step}\n"));
        }
        let mut blob = Vec::new();
        let mut offset = 0usize;
        for (name, shape, data) in &entries {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("param {name} {} {offset} {}\n", dims.join(","), data.len()));
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += data.len();
        }

        write_replace(&dir.join(BLOB), &blob)?;
        write_replace(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if blob.len() % 4 != 0 {
            return Err(bad(&bpath, "blob length is not a multiple of 4"));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(&mpath, "not a checkpoint manifest"));
        }
        let (mut step, mut epoch, mut hash) = (None, None, None);
        let mut metrics = BTreeMap::new();
        let mut toml = String::new();
        let mut optim_step = None;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let at = |r: &str| bad(&mpath, format!("line {}: {r}", i + 2));
            let (key, rest) = line.split_once(' ').ok_or_else(|| at("missing value"))?;
            match key {
                "step" => step = Some(rest.parse::<u64>().map_err(|e| at(&e.to_string()))?),
                "epoch" => epoch = Some(rest.parse::<u64>().map_err(|e| at(&e.to_string()))?),
                "taxonomy" => hash = Some(rest.to_string()),
                "optimizer" => optim_step = Some(rest.parse::<u64>().map_err(|e| at(&e.to_string()))?),
                "metric" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| at("metric needs a name and a value"))?;
                    metrics.insert(k.to_string(), v.parse::<f64>().map_err(|e| at(&e.to_string()))?);
                }
                "config" => {
                    toml.push_str(rest);
                    toml.push('\n');
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, len] = f.as_slice() else {
                        return Err(at("param needs name, shape, offset and length"));
                    };
                    let shape: Vec<usize> = if dims.is_empty() {
                        vec![]
                    } else {
                        dims.split(',')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| at("bad shape"))?
                    };
                    let offset: usize = offset.parse().map_err(|_| at("bad offset"))?;
                    let len: usize = len.parse().map_err(|_| at("bad length"))?;
                    let data = floats
                        .get(offset..offset + len)
                        .ok_or_else(|| at("range exceeds the blob"))?
                        .to_vec();
                    let t = Tensor::new(shape, data).map_err(|e| at(&e.to_string()))?;
                    tensors.push((name.to_string(), t));
                }
                other => return Err(at(&format!("unknown key {other:?}"))),
            }
        }
        let model: ModelConfig = toml::from_str(&toml).map_err(|e| bad(&mpath, format!("config: {e}")))?;

        let mut params = ParamStore::new();
        let mut optim: BTreeMap<String, [Option<Vec<f32>>; 3]> = BTreeMap::new();
        for (name, t) in tensors {
            let slot = [("optim.m.", 0), ("optim.v.", 1), ("optim.slow.", 2)]
                .into_iter()
                .find_map(|(p, i)| name.strip_prefix(p).map(|rest| (rest.to_string(), i)));
            match slot {
                Some((param, i)) => optim.entry(param).or_default()[i] = Some(t.into_data()),
                None => params.insert(name, t),
            }
        }
        let optimizer = match optim_step {
            None if optim.is_empty() => None,
            None => return Err(bad(&mpath, "optimizer tensors without an optimizer step")),
            Some(s) => {
                let mut states = BTreeMap::new();
                for (name, [m, v, slow]) in optim {
                    let (Some(m), Some(v), Some(slow)) = (m, v, slow) else {
                        return Err(bad(&mpath, format!("incomplete optimizer state for {name}")));
                    };
                    states.insert(
                        name,
                        ParamState {
                            moments: Moments { m, v },
                            slow,
                        },
                    );
                }
                Some((s, states))
            }
        };
        params.set_frozen("generic.", model.freeze_generic);
        Ok(Self {
            model,
            params,
            step: step.ok_or_else(|| bad(&mpath, "missing step"))?,
            epoch: epoch.ok_or_else(|| bad(&mpath, "missing epoch"))?,
            metrics,
            taxonomy_hash: hash.ok_or_else(|| bad(&mpath, "missing taxonomy hash"))?,
            optimizer,
        })
    }
}

fn write_replace(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
