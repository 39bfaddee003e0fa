use super::hyper::PartitionMode;
use crate::error::{Error, Result};
use crate::model::{BlockRole, ParamStore};
use crate::ndcore::Float;

/// Contiguous run `[start, start + len)` of the flattened store block `block`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub block: usize,
    pub start: usize,
    pub len: usize,
}

/// A preconditioning block: the parameters that share one second-moment
/// scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub label: String,
    pub role: BlockRole,
    pub segments: Vec<Segment>,
}

impl Group {
    pub fn numel(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    pub mode: PartitionMode,
    pub groups: Vec<Group>,
}

impl BlockPartition {
    /// Partitions the store blocks listed in `blocks` (indices into `store`).
    pub fn new<T: Float>(store: &ParamStore<T>, blocks: &[usize], mode: PartitionMode) -> Result<Self> {
        let mut groups = Vec::new();
        let mut fused: Option<Group> = None;
        for &b in blocks {
            let blk = store.block(b);
            let whole = Segment {
                block: b,
                start: 0,
                len: blk.numel(),
            };
            match mode {
                PartitionMode::WholeLayer => groups.push(Group {
                    label: blk.name.clone(),
                    role: blk.role,
                    segments: vec![whole],
                }),
                PartitionMode::PerLogitLastLayer if blk.role == BlockRole::Unembedding => {
                    let (rows, width) = match blk.shape() {
                        [r, c] => (*r, *c),
                        s => {
                            return Err(Error::shape(
                                "partition",
                                format!("unembedding `{}` must be a matrix, got {s:?}", blk.name),
                            ))
                        }
                    };
                    groups.extend((0..rows).map(|r| Group {
                        label: format!("{}[{r}]", blk.name),
                        role: blk.role,
                        segments: vec![Segment {
                            block: b,
                            start: r * width,
                            len: width,
                        }],
                    }));
                }
                PartitionMode::PerLogitLastLayer => groups.push(Group {
                    label: blk.name.clone(),
                    role: blk.role,
                    segments: vec![whole],
                }),
                PartitionMode::Singleton => groups.extend((0..blk.numel()).map(|i| Group {
                    label: format!("{}[{i}]", blk.name),
                    role: blk.role,
                    segments: vec![Segment {
                        block: b,
                        start: i,
                        len: 1,
                    }],
                })),
                PartitionMode::GlobalMatrix if blk.role.is_matrix() => {
                    fused
                        .get_or_insert_with(|| Group {
                            label: "global_matrix".into(),
                            role: blk.role,
                            segments: Vec::new(),
                        })
                        .segments
                        .push(whole);
                }
                PartitionMode::GlobalMatrix => groups.push(Group {
                    label: blk.name.clone(),
                    role: blk.role,
                    segments: vec![whole],
                }),
            }
        }
        if let Some(g) = fused {
            groups.insert(0, g);
        }
        if let Some(g) = groups.iter().find(|g| g.numel() == 0) {
            return Err(Error::InvalidArgument(format!(
                "empty preconditioning block `{}`",
                g.label
            )));
        }
        Ok(Self { mode, groups })
    }

    pub fn numel(&self) -> usize {
        self.groups.iter().map(Group::numel).sum()
    }
}
