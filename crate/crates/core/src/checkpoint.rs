//! Parameter checkpoints ("LFDS-CKPT-1"): a model-config header followed by
//! every bank entry (dot-separated name, shape, row-major f64 data).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamBank, Tensor};
use crate::train::{GraphClassifier, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8] = b"LFDS-CKPT-1\n";

pub fn save_checkpoint(path: &Path, model: &GraphClassifier) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header: String = model
        .cfg
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_bytes(&mut buf, header.as_bytes());
    put_u32(&mut buf, model.bank.len() as u32);
    for (_, entry) in model.bank.iter() {
        put_bytes(&mut buf, entry.name.as_bytes());
        buf.push(u8::from(entry.tensor.requires_grad));
        put_u32(&mut buf, entry.tensor.shape.len() as u32);
        for &d in &entry.tensor.shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in &entry.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::write_atomic(path, &buf)
}

/// Reads the header and raw entries of a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamBank)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Corrupt {
                what: "checkpoint",
                msg: "unexpected end of file".into(),
            });
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt {
            what: "checkpoint",
            msg: format!("{} does not start with LFDS-CKPT-1", path.display()),
        });
    }
    let get_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let header_len = get_u32(&mut pos)? as usize;
    let header = std::str::from_utf8(take(&mut pos, header_len)?)
        .map_err(|_| Error::Corrupt {
            what: "checkpoint",
            msg: "header is not UTF-8".into(),
        })?
        .to_string();
    let kv: Vec<(String, String)> = header
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let cfg = ModelConfig::from_kv(&kv)?;

    let count = get_u32(&mut pos)? as usize;
    let mut bank = ParamBank::new();
    for _ in 0..count {
        let name_len = get_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Corrupt {
                what: "checkpoint",
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let trainable = take(&mut pos, 1)?[0] != 0;
        let rank = get_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let tensor = Tensor::new(shape, data)?;
        if trainable {
            bank.param(name, tensor);
        } else {
            bank.state(name, tensor);
        }
    }
    Ok((cfg, bank))
}

/// Rebuilds a runnable model from a checkpoint.
pub fn load_model(path: &Path) -> Result<GraphClassifier> {
    let (cfg, saved) = read_checkpoint(path)?;
    let mut model = GraphClassifier::new(cfg, 0)?;
    model.bank.load_values_from(&saved)?;
    Ok(model)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_separable;
    use crate::heads::LfdsKind;
    use crate::train::HeadSpec;

    fn tiny_model(kind: Option<LfdsKind>) -> GraphClassifier {
        let cfg = ModelConfig {
            input_dim: 2,
            num_classes: 2,
            backbone_dims: vec![4, 4, 4],
            head: kind.map(|kind| HeadSpec { kind, m: 4 }),
            classifier_hidden: 6,
            dropout_classifier: 0.5,
            dropout_input: 0.2,
            dropout_element: 0.4,
            normalize_adjacency: false,
            fuse_before_dropout: true,
            spectral_orthonormal_init: true,
            lambda: 1e-3,
        };
        GraphClassifier::new(cfg, 42).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_values_and_predictions() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let mut model = tiny_model(Some(LfdsKind::ParamSpectralGraph));
        save_checkpoint(&path, &model).unwrap();
        let mut loaded = load_model(&path).unwrap();

        for (id, entry) in model.bank.iter() {
            let other = loaded.bank.lookup(&entry.name).unwrap();
            assert_eq!(loaded.bank.get(other).data, model.bank.get(id).data);
            assert_eq!(
                loaded.bank.get(other).requires_grad,
                model.bank.get(id).requires_grad
            );
        }
        let ds = generate_separable(2, 3);
        for s in &ds.samples {
            assert_eq!(model.predict(s).unwrap(), loaded.predict(s).unwrap());
        }
    }

    #[test]
    fn parameter_names_follow_the_documented_scheme() {
        let model = tiny_model(Some(LfdsKind::ParamSpectralGraph));
        for name in [
            "backbone.layer0.phi1",
            "backbone.layer2.bn.gamma",
            "backbone.layer1.bn.running_mean",
            "head.W",
            "head.U",
            "head.layer0.theta",
            "head.a1_raw",
            "head.a2_raw",
            "classifier.layer2.weight",
        ] {
            assert!(model.bank.lookup(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.ckpt");
        std::fs::write(&path, b"LFDS-CKPT-1\n\x01\x02").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
