use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Mode, Tensor2};
use crate::error::{Error, Result};

pub const NODE_X: usize = 0;
pub const NODE_U: usize = 1;
pub const NODE_Z: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphVariant {
    /// `X -> Z <- U`.
    #[default]
    Collider,
    /// `Z -> X`, `Z -> U`.
    Fork,
    /// `X -> Z`, with `U` bypassing `Z` straight into the head.
    Direct,
    /// No graph: `Z` is a projection of `[h_X; h_U]`.
    Concat,
}

impl GraphVariant {
    pub const ALL: [GraphVariant; 4] = [
        GraphVariant::Collider,
        GraphVariant::Fork,
        GraphVariant::Direct,
        GraphVariant::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphVariant::Collider => "collider",
            GraphVariant::Fork => "fork",
            GraphVariant::Direct => "direct",
            GraphVariant::Concat => "concat",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            GraphVariant::Collider => 0,
            GraphVariant::Fork => 1,
            GraphVariant::Direct => 2,
            GraphVariant::Concat => 3,
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown graph variant {s:?}, expected collider|fork|direct|concat"
                ))
            })
    }
}

/// Node order is `[X, U, Z]`. Row `i` lists the nodes `i` attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalGraphSpec {
    pub variant: GraphVariant,
    pub adjacency: [[u8; 3]; 3],
    /// Inference edges plus the reverse edges used while training.
    pub train_adjacency: [[u8; 3]; 3],
}

pub fn build_adjacency(variant: GraphVariant) -> CausalGraphSpec {
    let (adjacency, train_adjacency) = match variant {
        GraphVariant::Collider => (
            [[1, 0, 0], [0, 1, 0], [1, 1, 1]],
            [[1, 0, 1], [0, 1, 1], [1, 1, 1]],
        ),
        GraphVariant::Fork => (
            [[1, 0, 1], [0, 1, 1], [0, 0, 1]],
            [[1, 0, 1], [0, 1, 1], [0, 0, 1]],
        ),
        GraphVariant::Direct => (
            [[1, 0, 0], [0, 1, 0], [1, 0, 1]],
            [[1, 0, 1], [0, 1, 1], [1, 0, 1]],
        ),
        GraphVariant::Concat => (
            [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        ),
    };
    CausalGraphSpec {
        variant,
        adjacency,
        train_adjacency,
    }
}

impl CausalGraphSpec {
    pub fn uses_graph(&self) -> bool {
        self.variant != GraphVariant::Concat
    }

    pub fn matrix(&self, mode: Mode) -> [[u8; 3]; 3] {
        match mode {
            Mode::Train => self.train_adjacency,
            Mode::Eval => self.adjacency,
        }
    }

    pub fn mask(&self, mode: Mode) -> Tensor2 {
        let m = self.matrix(mode);
        Tensor2::from_rows(&m.map(|r| r.map(f64::from).to_vec())).expect("3x3 mask")
    }
}
