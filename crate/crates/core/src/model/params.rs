use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{DType, Float, Tensor};

/// What a parameter tensor does in the network. Optimizer routing, blockwise
/// partitions and telemetry filters all select on this tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Embedding,
    AttnQkv,
    AttnOut,
    MlpIn,
    MlpOut,
    LayernormGain,
    QkNormGain,
    Unembedding,
}

impl BlockRole {
    pub const ALL: [BlockRole; 8] = [
        BlockRole::Embedding,
        BlockRole::AttnQkv,
        BlockRole::AttnOut,
        BlockRole::MlpIn,
        BlockRole::MlpOut,
        BlockRole::LayernormGain,
        BlockRole::QkNormGain,
        BlockRole::Unembedding,
    ];

    /// Matrix roles other than the last layer.
    pub const HIDDEN_MATRICES: [BlockRole; 5] = [
        BlockRole::Embedding,
        BlockRole::AttnQkv,
        BlockRole::AttnOut,
        BlockRole::MlpIn,
        BlockRole::MlpOut,
    ];

    /// LayerNorm-style gains, including the optional QK-norm gains.
    pub const NORM_GAINS: [BlockRole; 2] = [BlockRole::LayernormGain, BlockRole::QkNormGain];

    pub fn is_matrix(self) -> bool {
        !matches!(self, BlockRole::LayernormGain | BlockRole::QkNormGain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockRole::Embedding => "embedding",
            BlockRole::AttnQkv => "attn_qkv",
            BlockRole::AttnOut => "attn_out",
            BlockRole::MlpIn => "mlp_in",
            BlockRole::MlpOut => "mlp_out",
            BlockRole::LayernormGain => "layernorm_gain",
            BlockRole::QkNormGain => "qk_norm_gain",
            BlockRole::Unembedding => "unembedding",
        }
    }
}

impl fmt::Display for BlockRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub role: BlockRole,
    tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Float> ParamBlock<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    /// Mutable access to the values; the shape stays fixed.
    pub fn values_mut(&mut self) -> &mut [T] {
        self.tensor.data_mut()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered registry of named, role-tagged parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    blocks: Vec<ParamBlock<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable block and returns its index.
    pub fn register(&mut self, name: impl Into<String>, role: BlockRole, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.blocks.len());
        self.blocks.push(ParamBlock {
            name,
            role,
            tensor,
            trainable: true,
        });
        Ok(self.blocks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn block(&self, idx: usize) -> &ParamBlock<T> {
        &self.blocks[idx]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut ParamBlock<T> {
        &mut self.blocks[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock<T>> {
        self.index_of(name).map(|i| &self.blocks[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|b| &b.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.numel()).sum()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].trainable).collect()
    }

    pub fn roles(&self) -> BTreeSet<BlockRole> {
        self.blocks.iter().map(|b| b.role).collect()
    }

    /// Marks every block whose role is in `roles` as (un)trainable.
    pub fn set_trainable(&mut self, roles: &[BlockRole], flag: bool) {
        for b in &mut self.blocks {
            if roles.contains(&b.role) {
                b.trainable = flag;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.tensor.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    role: b.role,
                    tensor: b.tensor.cast(),
                    trainable: b.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Writes the checkpoint format: one line of JSON header, then the raw
    /// little-endian payload of every block in registration order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE,
            blocks: self
                .blocks
                .iter()
                .map(|b| CheckpointEntry {
                    name: b.name.clone(),
                    role: b.role,
                    shape: b.shape().to_vec(),
                    trainable: b.trainable,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.total_params() * T::DTYPE.size_of());
        for b in &self.blocks {
            for &x in b.tensor.data() {
                x.write_le(&mut buf);
            }
        }
        w.write_all(&buf)
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let header: CheckpointHeader = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {:?}, requested {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let width = T::DTYPE.size_of();
        let mut store = ParamStore::new();
        for entry in header.blocks {
            let numel: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; numel * width];
            reader
                .read_exact(&mut bytes)
                .map_err(|e| Error::io("<checkpoint>", e))?;
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            let idx = store.register(entry.name, entry.role, Tensor::new(entry.shape, data)?)?;
            store.blocks[idx].trainable = entry.trainable;
        }
        let mut rest = Vec::new();
        reader
            .read_to_end(&mut rest)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        if !rest.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after checkpoint payload",
                rest.len()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

const CHECKPOINT_FORMAT: &str = "optbench-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dtype: DType,
    blocks: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    role: BlockRole,
    shape: Vec<usize>,
    trainable: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register(
            "a",
            BlockRole::Embedding,
            Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5),
        )
        .unwrap();
        s.register("g", BlockRole::LayernormGain, Tensor::full(vec![3], 1.0))
            .unwrap();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = sample();
        assert!(s.register("a", BlockRole::MlpIn, Tensor::zeros(vec![1])).is_err());
        assert_eq!(s.total_params(), 9);
    }

    #[test]
    fn trainable_flags() {
        let mut s = sample();
        s.set_trainable(&[BlockRole::LayernormGain], false);
        assert_eq!(s.trainable_params(), 6);
        assert_eq!(s.trainable_indices(), vec![0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = sample();
        s.set_trainable(&[BlockRole::LayernormGain], false);
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..header_end]).unwrap();
        assert_eq!(header["dtype"], "fp32");
        assert_eq!(header["blocks"][1]["role"], "layernorm_gain");
        assert_eq!(bytes.len() - header_end - 1, 9 * 4);
        // payload is little-endian f32 in registration order
        assert_eq!(&bytes[header_end + 1 + 4..header_end + 1 + 8], &0.5f32.to_le_bytes());
        let back = ParamStore::<f32>::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_rejects_wrong_dtype_and_truncation() {
        let s = sample();
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        assert!(ParamStore::<f64>::read_checkpoint(&bytes[..]).is_err());
        assert!(ParamStore::<f32>::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
