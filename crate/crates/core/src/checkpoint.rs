//! Checkpoint files: a `key=value` text manifest terminated by a line
//! `end`, followed by the parameter tensors and then any optimizer velocity
//! tensors, each as a `SELT` record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "selectroscope-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_END: &[u8] = b"end\n";

/// Where in training a checkpoint was taken. `batch_index` counts batches
/// completed within `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub batch_index: usize,
    pub seed: u64,
}

impl CheckpointMeta {
    /// Stable identifier, also used as the file stem.
    pub fn id(&self) -> String {
        format!("ckpt_e{:03}_b{:05}", self.epoch, self.batch_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub meta: CheckpointMeta,
    pub params: Vec<Tensor>,
    /// Momentum buffers in parameter order; empty when not saved.
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            meta,
            params: model.param_tensors().to_vec(),
            velocity: Vec::new(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parameters(&self.spec, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let s = &self.spec;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("format", CHECKPOINT_FORMAT.into());
        line("version", CHECKPOINT_VERSION.to_string());
        line("blocks_per_module", join(&s.blocks_per_module));
        line("channels_per_module", join(&s.channels_per_module));
        line("strides", join(&s.strides));
        line("input_shape", join(&s.input_shape));
        line("num_classes", s.num_classes.to_string());
        line("epoch", self.meta.epoch.to_string());
        line("batch_index", self.meta.batch_index.to_string());
        line("seed", self.meta.seed.to_string());
        line("param_tensors", self.params.len().to_string());
        line("velocity_tensors", self.velocity.len().to_string());
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(MANIFEST_END);
        for t in self.params.iter().chain(&self.velocity) {
            t.write_to(&mut bytes).expect("writing to a Vec cannot fail");
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let end = find_manifest_end(bytes)
            .ok_or_else(|| Error::Checkpoint("manifest terminator not found (truncated file?)".into()))?;
        let text = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::Checkpoint("manifest is not valid UTF-8".into()))?;
        let mut fields = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected key=value", n + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest field `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("manifest field `{k}` is not an integer list")))
        };

        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint("not a selectroscope checkpoint".into()));
        }
        let version = num("version")?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let input = list("input_shape")?;
        let input_shape: [usize; 3] = input
            .try_into()
            .map_err(|_| Error::Checkpoint("input_shape must have three entries".into()))?;
        let spec = ArchitectureSpec {
            blocks_per_module: list("blocks_per_module")?,
            channels_per_module: list("channels_per_module")?,
            strides: list("strides")?,
            input_shape,
            num_classes: num("num_classes")? as usize,
        };
        spec.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid architecture in manifest: {e}")))?;
        let meta = CheckpointMeta {
            epoch: num("epoch")? as usize,
            batch_index: num("batch_index")? as usize,
            seed: num("seed")?,
        };
        let n_params = num("param_tensors")? as usize;
        let n_velocity = num("velocity_tensors")? as usize;

        let mut offset = (end + MANIFEST_END.len()) as u64;
        let mut rest = &bytes[end + MANIFEST_END.len()..];
        let mut read = |count: usize| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let t = Tensor::read_from(&mut rest, offset)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                offset += t.encoded_len();
                out.push(t);
            }
            Ok(out)
        };
        let params = read(n_params)?;
        let velocity = read(n_velocity)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", rest.len())));
        }
        // shape validation against the architecture
        Model::from_parameters(&spec, params.clone())?;
        if !velocity.is_empty()
            && (velocity.len() != params.len()
                || velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape()))
        {
            return Err(Error::Checkpoint("velocity buffers do not match parameters".into()));
        }
        Ok(Checkpoint {
            spec,
            meta,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn find_manifest_end(bytes: &[u8]) -> Option<usize> {
    if bytes.starts_with(MANIFEST_END) {
        return Some(0);
    }
    bytes
        .windows(MANIFEST_END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == MANIFEST_END)
        .map(|p| p + 1)
}

impl Model {
    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        Checkpoint::from_model(self, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
        let ck = Checkpoint::load(path)?;
        Ok((ck.model()?, ck.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ArchitectureSpec {
        ArchitectureSpec {
            blocks_per_module: vec![1, 1],
            channels_per_module: vec![2, 4],
            strides: vec![1, 2],
            input_shape: [1, 4, 4],
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::build(&spec(), 9).unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            batch_index: 7,
            seed: 9,
        };
        let bytes = Checkpoint::from_model(&m, meta).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        let m2 = back.model().unwrap();
        for ((_, a), (_, b)) in m.parameters().zip(m2.parameters()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn damaged_files_are_checkpoint_errors() {
        let m = Model::build(&spec(), 1).unwrap();
        let bytes = Checkpoint::from_model(&m, CheckpointMeta::default()).to_bytes();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let text = String::from_utf8_lossy(&bytes).replace("version=1", "version=7");
        let mut bumped = text.into_bytes();
        bumped.truncate(10);
        assert!(Checkpoint::from_bytes(&bumped).is_err());

        let mut v = bytes.clone();
        let pos = v.windows(9).position(|w| w == b"version=1").unwrap();
        v[pos + 8] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Checkpoint(m)) if m.contains("version")));

        // shape mismatch: manifest claims a wider network
        let text = String::from_utf8(bytes[..bytes.windows(4).position(|w| w == b"end\n").unwrap()].to_vec()).unwrap();
        let wider = text.replace("channels_per_module=2,4", "channels_per_module=2,5");
        let mut w = wider.into_bytes();
        w.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(Checkpoint::from_bytes(&w), Err(Error::Checkpoint(_))));
    }
}
