//! Binary checkpoint: hyperparameters, vocabulary and every parameter array.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"VRELCKPT"  u32 version
//! u64 len  header JSON   {"hyperparams": .., "embeddings_trainable": ..}
//! u64 len  vocabulary text
//! u32 array count
//! per array: u32 len name, u32 ndim, u64 dims.., f64 data..
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::LstmParams;
use crate::error::{Error, Result};
use crate::image::GateParams;
use crate::model::{Model, ModelParams, GROUP_NAMES};
use crate::tensor::Tensor;
use crate::train::Hyperparams;
use crate::vocab::{EmbeddingTable, Vocabulary};

const MAGIC: &[u8; 8] = b"VRELCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyperparams: Hyperparams,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyperparams: Hyperparams,
    embeddings_trainable: bool,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model::new(self.params.clone(), self.hyperparams.forward_config())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            hyperparams: self.hyperparams.clone(),
            embeddings_trainable: self.params.embeddings.trainable,
        })
        .map_err(|e| Error::Contract(format!("cannot serialize hyperparameters: {e}")))?;
        put_blob(&mut out, &header);
        put_blob(&mut out, self.vocab.to_text().as_bytes());
        let groups = self.params.groups();
        out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
        for (name, t) in groups {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| r.error(format!("bad header: {e}")))?;
        let vocab_len = r.u64()? as usize;
        let vocab_text = std::str::from_utf8(r.take(vocab_len)?).map_err(|_| r.error("vocabulary is not UTF-8"))?;
        let vocab = Vocabulary::from_text(vocab_text, origin)?;

        let count = r.u32()? as usize;
        if count != GROUP_NAMES.len() {
            return Err(r.error(format!("expected {} arrays, found {count}", GROUP_NAMES.len())));
        }
        let mut arrays = Vec::with_capacity(count);
        for expected in GROUP_NAMES {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            if name != expected.as_bytes() {
                return Err(r.error(format!("expected array {expected}, found {}", String::from_utf8_lossy(name))));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(r.error(format!("array {expected} of shape {shape:?} runs past end of file")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push(Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }

        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("count checked above");
        let embeddings = EmbeddingTable {
            weights: next(),
            trainable: header.embeddings_trainable,
        };
        let lstm = LstmParams::new(next(), next(), next())?;
        let gate = GateParams {
            w_gate: next(),
            b_gate: next(),
            w_proj: next(),
        };
        check_consistent(&embeddings, &lstm, &gate, &vocab, &header.hyperparams)?;
        Ok(Self {
            hyperparams: header.hyperparams,
            vocab,
            params: ModelParams { embeddings, lstm, gate },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn check_consistent(e: &EmbeddingTable, lstm: &LstmParams, gate: &GateParams, vocab: &Vocabulary, hp: &Hyperparams) -> Result<()> {
    let shape = |op, left: &[usize], right: Vec<usize>| {
        if left == right.as_slice() {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                left: left.to_vec(),
                right,
            })
        }
    };
    shape("checkpoint embeddings", e.weights.shape(), vec![vocab.len(), hp.embed_dim])?;
    shape("checkpoint lstm", lstm.w_input.shape(), vec![hp.embed_dim, 4 * hp.hidden])?;
    let k = gate.w_proj.rows();
    shape("checkpoint gate", gate.w_gate.shape(), vec![hp.hidden, k])?;
    shape("checkpoint gate bias", gate.b_gate.shape(), vec![1, k])?;
    shape("checkpoint projection", gate.w_proj.shape(), vec![k, hp.hidden])
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(self.origin, 0, format!("byte {}: {}", self.pos, msg.into()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(format!("unexpected end of file reading {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::train::init_params;
    use crate::vocab::tokenize;

    fn sample() -> Checkpoint {
        let corpus = vec![tokenize("a red ball"), tokenize("the blue ball")];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let hp = Hyperparams {
            embed_dim: 4,
            hidden: 3,
            ..Hyperparams::default()
        };
        let params = init_params(hp.dims(vocab.len(), 5), 11);
        Checkpoint {
            hyperparams: hp,
            vocab,
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let origin = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, origin), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long, origin), Err(Error::Format { .. })));
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let mut ck = sample();
        ck.params = init_params(
            ModelDims {
                vocab_size: ck.vocab.len(),
                embed_dim: 4,
                hidden: 2,
                feature_dim: 5,
            },
            1,
        );
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
    }
}
