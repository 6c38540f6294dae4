use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    /// Context tokens attend to each other; the predictive is invariant to
    /// context order.
    CPermInvariant,
    /// Context token i attends to context tokens up to i.
    Causal,
}

impl MaskKind {
    pub fn label(self) -> &'static str {
        match self {
            MaskKind::CPermInvariant => "cperm",
            MaskKind::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cperm" | "c_perm_invariant" | "CPermInvariant" => Some(MaskKind::CPermInvariant),
            "causal" | "Causal" => Some(MaskKind::Causal),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Fixed context length with many targets predicted at once.
    TrainBlock,
    /// One target appended after the context.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskScheme {
    pub kind: MaskKind,
    pub phase: Phase,
}

impl MaskScheme {
    pub fn train(kind: MaskKind) -> Self {
        Self {
            kind,
            phase: Phase::TrainBlock,
        }
    }

    pub fn inference(kind: MaskKind) -> Self {
        Self {
            kind,
            phase: Phase::Inference,
        }
    }
}

/// Square boolean attention pattern; row i lists the keys query i may see.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    n_context: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_context(&self) -> usize {
        self.n_context
    }

    pub fn n_targets(&self) -> usize {
        self.n - self.n_context
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    /// Number of allowed (query, key) pairs.
    pub fn allowed_pairs(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "AttentionMask({}x{}, context {})",
            self.n, self.n, self.n_context
        )?;
        for i in 0..self.n {
            let row: String = self
                .row(i)
                .iter()
                .map(|&b| if b { '1' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Mask over `context_len` context tokens followed by `n_targets` targets.
/// Targets see every context token and themselves, never each other, and
/// context tokens never see targets. Both phases share this pattern; the
/// phase only documents how many targets are expected.
pub fn build_mask(
    scheme: MaskScheme,
    context_len: usize,
    n_targets: usize,
) -> Result<AttentionMask> {
    if n_targets == 0 {
        return Err(Error::InvalidArgument(
            "mask needs at least one target".into(),
        ));
    }
    let n = context_len + n_targets;
    let mut bits = vec![false; n * n];
    for i in 0..context_len {
        let upto = match scheme.kind {
            MaskKind::CPermInvariant => context_len,
            MaskKind::Causal => i + 1,
        };
        for j in 0..upto {
            bits[i * n + j] = true;
        }
    }
    for i in context_len..n {
        for j in 0..context_len {
            bits[i * n + j] = true;
        }
        bits[i * n + i] = true;
    }
    Ok(AttentionMask {
        n,
        n_context: context_len,
        bits,
    })
}
