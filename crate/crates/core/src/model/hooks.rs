//! Edit hooks on attention maps and per-head states.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// A `(layer, head)` address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadSite {
    pub layer: usize,
    pub head: usize,
}

impl HeadSite {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Absolute sequence positions a hook touches. For attention edits these
/// select query rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionRange {
    All,
    From(usize),
    Only(BTreeSet<usize>),
}

impl PositionRange {
    pub fn contains(&self, pos: usize) -> bool {
        match self {
            PositionRange::All => true,
            PositionRange::From(start) => pos >= *start,
            PositionRange::Only(set) => set.contains(&pos),
        }
    }
}

/// Which `(layer, head, position)` triples a transform is applied to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookScope {
    /// `None` means every head in every layer.
    pub sites: Option<BTreeSet<HeadSite>>,
    pub positions: PositionRange,
}

impl HookScope {
    pub fn everywhere() -> Self {
        Self {
            sites: None,
            positions: PositionRange::All,
        }
    }

    pub fn new(sites: Option<BTreeSet<HeadSite>>, positions: PositionRange) -> Self {
        Self { sites, positions }
    }

    pub fn covers_head(&self, layer: usize, head: usize) -> bool {
        self.sites
            .as_ref()
            .is_none_or(|s| s.contains(&HeadSite::new(layer, head)))
    }

    pub fn covers(&self, layer: usize, head: usize, pos: usize) -> bool {
        self.covers_head(layer, head) && self.positions.contains(pos)
    }

    pub(crate) fn check_bounds(&self, layers: usize, heads: usize, seq_len: usize) -> Result<()> {
        if let Some(sites) = &self.sites {
            if let Some(bad) = sites.iter().find(|s| s.layer >= layers || s.head >= heads) {
                return Err(LabError::config(format!(
                    "hook scope names {bad} outside a {layers}x{heads} model"
                )));
            }
        }
        if let PositionRange::Only(set) = &self.positions {
            if let Some(&p) = set.iter().find(|&&p| p >= seq_len) {
                return Err(LabError::config(format!(
                    "hook scope names position {p} beyond sequence length {seq_len}"
                )));
            }
        }
        Ok(())
    }
}

/// Post-softmax rewrite of one attention row.
///
/// `scores` are the pre-softmax logits of the row (masked entries are
/// `-inf`) and `weights` their softmax. The edited row is renormalised by the
/// model afterwards, so an edit may leave it unnormalised.
pub trait AttentionEdit: Send + Sync {
    fn apply(&self, site: HeadSite, row: usize, scores: &[f64], weights: &mut [f64]);

    /// Pulls back `grad_out` (gradient w.r.t. the edited, not yet
    /// renormalised row) into the scores and the unedited weights, adding
    /// into the two output buffers.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        site: HeadSite,
        row: usize,
        scores: &[f64],
        weights: &[f64],
        grad_out: &[f64],
        grad_scores: &mut [f64],
        grad_weights: &mut [f64],
    );
}

/// Rewrite of a per-head state `h_{l,h}` at one position, applied before the
/// output projection. The reverse pass treats it as a translation, so its
/// Jacobian is the identity.
pub trait StateEdit: Send + Sync {
    fn apply(&self, site: HeadSite, pos: usize, state: &mut [f64]);
}

/// Hooks for one forward pass.
#[derive(Clone)]
pub struct HookSet {
    pub attention_edit: Option<(HookScope, Arc<dyn AttentionEdit>)>,
    pub state_edit: Option<(HookScope, Arc<dyn StateEdit>)>,
    /// Divide each attention row by its sum after editing. Only finite
    /// difference probes switch this off.
    pub renormalize: bool,
}

impl Default for HookSet {
    fn default() -> Self {
        Self::none()
    }
}

impl fmt::Debug for HookSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookSet")
            .field("attention_edit", &self.attention_edit.as_ref().map(|(s, _)| s))
            .field("state_edit", &self.state_edit.as_ref().map(|(s, _)| s))
            .field("renormalize", &self.renormalize)
            .finish()
    }
}

impl HookSet {
    pub fn none() -> Self {
        Self {
            attention_edit: None,
            state_edit: None,
            renormalize: true,
        }
    }

    pub fn with_attention(mut self, scope: HookScope, edit: Arc<dyn AttentionEdit>) -> Self {
        self.attention_edit = Some((scope, edit));
        self
    }

    pub fn with_state(mut self, scope: HookScope, edit: Arc<dyn StateEdit>) -> Self {
        self.state_edit = Some((scope, edit));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.attention_edit.is_none() && self.state_edit.is_none()
    }

    pub(crate) fn check_bounds(&self, layers: usize, heads: usize, seq_len: usize) -> Result<()> {
        if let Some((scope, _)) = &self.attention_edit {
            scope.check_bounds(layers, heads, seq_len)?;
        }
        if let Some((scope, _)) = &self.state_edit {
            scope.check_bounds(layers, heads, seq_len)?;
        }
        Ok(())
    }
}
