//! Checkpoint format: an 8-byte magic, a little-endian u64 header length, a
//! JSON header (config, scalar metadata, tensor index), then the raw tensor
//! data as little-endian f64. Model parameters, batch-norm running
//! statistics, optimizer velocity (under an `opt.` prefix), the epoch
//! counter, the best validation metric, and the shuffle RNG position are
//! all captured, so a resumed run is bit-identical to an unbroken one.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamKind;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"OXDTCK01";

/// Serializable position of a `ChaCha8Rng` stream: the seed plus the
/// 128-bit word offset, split into two u64 halves for JSON friendliness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Training progress carried alongside the weights.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub epoch: usize,
    pub best_metric: f64,
    pub rng: Option<RngState>,
    /// Optimizer velocity, parallel to the trainable-parameter walk:
    /// (parameter name, flat data, shape).
    pub velocity: Vec<(String, Vec<S>, Vec<usize>)>,
}

impl<S: Scalar> Default for TrainState<S> {
    fn default() -> Self {
        Self { epoch: 0, best_metric: 0.0, rng: None, velocity: Vec::new() }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the raw data block.
    offset: u64,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    best_metric: f64,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

fn kind_tag(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::Buffer => "buffer",
    }
}

/// Write model weights and training state to `path`.
pub fn save<S: Scalar>(path: &Path, model: &Model<S>, state: &TrainState<S>) -> Result<()> {
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    let mut append = |name: String, shape: Vec<usize>, values: &[S], kind: &str| {
        entries.push(TensorEntry { name, shape, offset, kind: kind.into() });
        offset += values.len() as u64;
        for v in values {
            data.extend_from_slice(&v.to_f64_().to_le_bytes());
        }
    };
    model.visit(&mut |name: &str, t: &Tensor<S>, kind: ParamKind| {
        append(name.to_string(), t.shape().to_vec(), &t.to_vec(), kind_tag(kind));
    });
    for (name, values, shape) in &state.velocity {
        append(format!("opt.{name}"), shape.clone(), values, "opt");
    }
    let header = Header {
        config: model.cfg.clone(),
        epoch: state.epoch,
        best_metric: state.best_metric,
        rng: state.rng.clone(),
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    fs::write(path, out)?;
    Ok(())
}

fn parse<S: Scalar>(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("sized slice")) as usize;
    let data_start = 16 + hlen;
    if bytes.len() < data_start {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    let raw = &bytes[data_start..];
    if raw.len() % 8 != 0 {
        return Err(fail("raw block is not a whole number of f64s".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("sized chunk")))
        .collect();
    let total: u64 = header
        .tensors
        .last()
        .map(|t| t.offset + t.shape.iter().product::<usize>() as u64)
        .unwrap_or(0);
    if values.len() as u64 != total {
        return Err(fail(format!(
            "index wants {total} elements, raw block holds {}",
            values.len()
        )));
    }
    Ok((header, values))
}

/// Rebuild the model and training state from `path`. Every tensor the
/// config's build produces must appear in the file with an identical shape
/// (the shape audit that catches checkpoint/config mismatches).
pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, TrainState<S>)> {
    let (header, values) = parse::<S>(path)?;
    let model = Model::<S>::build(&header.config, 0)?;
    let slice_of = |e: &TensorEntry| -> &[f64] {
        let n: usize = e.shape.iter().product();
        &values[e.offset as usize..e.offset as usize + n]
    };

    let mut audit: Vec<String> = Vec::new();
    let mut used = vec![false; header.tensors.len()];
    model.visit(&mut |name: &str, t: &Tensor<S>, _| {
        match header.tensors.iter().position(|e| e.name == name) {
            Some(i) if header.tensors[i].shape == t.shape() => {
                used[i] = true;
                let src = slice_of(&header.tensors[i]);
                t.with_data_mut(|d| {
                    for (dst, v) in d.iter_mut().zip(src) {
                        *dst = S::from_f64(*v);
                    }
                });
            }
            Some(i) => audit.push(format!(
                "{name}: built {:?}, checkpoint {:?}",
                t.shape(),
                header.tensors[i].shape
            )),
            None => audit.push(format!("{name}: missing from checkpoint")),
        }
    });
    for (e, used) in header.tensors.iter().zip(&used) {
        if !used && e.kind != "opt" {
            audit.push(format!("{}: not produced by this config", e.name));
        }
    }
    if !audit.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: shape audit failed: {}",
            path.display(),
            audit.join("; ")
        )));
    }

    let velocity = header
        .tensors
        .iter()
        .filter(|e| e.kind == "opt")
        .map(|e| {
            let name = e.name.strip_prefix("opt.").unwrap_or(&e.name).to_string();
            let data = slice_of(e).iter().map(|&v| S::from_f64(v)).collect();
            (name, data, e.shape.clone())
        })
        .collect();
    let state = TrainState {
        epoch: header.epoch,
        best_metric: header.best_metric,
        rng: header.rng,
        velocity,
    };
    Ok((model, state))
}

/// Header-only read: the config and the per-tensor index sizes, without
/// rebuilding a model. Returns (config, trainable element count, total
/// tensor count).
pub fn inspect(path: &Path) -> Result<(ModelConfig, u64, usize)> {
    let (header, _) = parse::<f64>(path)?;
    let trainable = header
        .tensors
        .iter()
        .filter(|e| e.kind == "trainable")
        .map(|e| e.shape.iter().product::<usize>() as u64)
        .sum();
    Ok((header.config, trainable, header.tensors.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, AttentionSpec};
    use crate::model::ModelSize;
    use rand_chacha::rand_core::RngCore;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(ModelSize::NanoDesk, 2);
        cfg.input_size = 64;
        cfg.attention = AttentionSpec::new(AttentionKind::Eca);
        cfg
    }

    fn dump<S: Scalar>(model: &Model<S>) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        model.visit(&mut |n: &str, t: &Tensor<S>, _| {
            out.push((n.to_string(), t.shape().to_vec(), t.to_vec()));
        });
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let cfg = tiny_cfg();
        let model = Model::<f64>::build(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let state = TrainState {
            epoch: 17,
            best_metric: 0.625,
            rng: Some(RngState::capture(&rng)),
            velocity: vec![("backbone.stem.conv.w".into(), vec![0.5f64; 432], vec![16, 3, 3, 3])],
        };
        save(&path, &model, &state).unwrap();
        let (loaded, lstate) = load::<f64>(&path).unwrap();

        let (a, b) = (dump(&model), dump(&loaded));
        assert_eq!(a.len(), b.len());
        for ((n1, s1, d1), (n2, s2, d2)) in a.iter().zip(&b) {
            assert_eq!((n1, s1), (n2, s2));
            assert!(d1.iter().zip(d2).all(|(x, y)| x == y), "{n1} drifted");
        }
        assert_eq!(lstate.epoch, 17);
        assert_eq!(lstate.best_metric, 0.625);
        assert_eq!(lstate.velocity, state.velocity);

        // the restored stream continues exactly where the captured one will
        let mut restored = lstate.rng.unwrap().restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn shape_audit_catches_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let cfg = tiny_cfg();
        let model = Model::<f64>::build(&cfg, 1).unwrap();
        save(&path, &model, &TrainState::default()).unwrap();

        // rewrite the header with a different class count
        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header["config"]["num_classes"] = serde_json::json!(5);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + hlen..]);
        fs::write(&path, out).unwrap();

        let err = load::<f64>(&path).err().expect("load should fail").to_string();
        assert!(err.contains("shape audit"), "{err}");
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load::<f64>(&path).is_err());

        let cfg = tiny_cfg();
        let model = Model::<f64>::build(&cfg, 1).unwrap();
        save(&path, &model, &TrainState::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load::<f64>(&path).err().expect("load should fail").to_string();
        assert!(err.contains("elements") || err.contains("whole number"), "{err}");
    }

    #[test]
    fn trainable_index_matches_the_analytic_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let cfg = tiny_cfg();
        let model = Model::<f64>::build(&cfg, 1).unwrap();
        save(&path, &model, &TrainState::default()).unwrap();
        let (loaded_cfg, trainable, total) = inspect(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(trainable, crate::profile::count_params(&cfg).unwrap());
        assert_eq!(trainable, model.param_count() as u64);
        assert!(total > 0);
    }

    #[test]
    fn float_models_round_trip_through_the_f64_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let cfg = tiny_cfg();
        let model = Model::<f32>::build(&cfg, 5).unwrap();
        save(&path, &model, &TrainState::default()).unwrap();
        let (loaded, _) = load::<f32>(&path).unwrap();
        for ((n, _, d1), (_, _, d2)) in dump(&model).iter().zip(&dump(&loaded)) {
            assert!(d1.iter().zip(d2).all(|(x, y)| x == y), "{n} drifted");
        }
    }
}
