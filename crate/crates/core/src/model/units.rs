use serde::{Deserialize, Serialize};

use super::{Family, LayerKind, ModelGraph};

/// A prunable unit: filter `filter` of the node at index `layer`. For
/// residual block inputs `layer` is the block's `residual_begin` node and
/// `filter` indexes the channels the block still consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer: usize,
    pub filter: usize,
}

impl FilterRef {
    pub fn new(layer: usize, filter: usize) -> Self {
        FilterRef { layer, filter }
    }
}

impl std::fmt::Display for FilterRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.layer, self.filter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Filter,
    BlockInput,
}

/// Where a unit's contribution is zeroed when it is masked instead of
/// removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSite {
    /// Channel of a node's output, before any map-to-zero expansion.
    Output { node: usize, channel: usize },
    /// Stream channel entering a residual block.
    BlockInput { node: usize, channel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub id: FilterRef,
    pub kind: UnitKind,
    pub site: MaskSite,
}

impl ModelGraph {
    /// All prunable units in a stable order (node index, then filter).
    pub fn units(&self) -> Vec<Unit> {
        let mut out = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                LayerKind::Conv(c) | LayerKind::Pointwise(c) => {
                    let coupled = matches!(
                        self.nodes.get(k + 3).map(|n| &n.kind),
                        Some(LayerKind::Depthwise(_))
                    );
                    let site_node = if coupled { k + 4 } else { k + 1 };
                    for j in 0..c.filters() {
                        out.push(Unit {
                            id: FilterRef::new(k, j),
                            kind: UnitKind::Filter,
                            site: MaskSite::Output {
                                node: site_node,
                                channel: j,
                            },
                        });
                    }
                }
                LayerKind::Classifier(c) => {
                    for j in 0..c.filters() {
                        out.push(Unit {
                            id: FilterRef::new(k, j),
                            kind: UnitKind::Filter,
                            site: MaskSite::Output {
                                node: k,
                                channel: j,
                            },
                        });
                    }
                }
                LayerKind::ResidualBegin { input_map, .. } => {
                    let channels: Vec<usize> = match input_map {
                        Some(m) => m.survivors(),
                        None => (0..self.stream_channels_into(k)).collect(),
                    };
                    for (j, &c) in channels.iter().enumerate() {
                        out.push(Unit {
                            id: FilterRef::new(k, j),
                            kind: UnitKind::BlockInput,
                            site: MaskSite::BlockInput {
                                node: k,
                                channel: c,
                            },
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn enumerate_prunable(&self) -> Vec<FilterRef> {
        self.units().into_iter().map(|u| u.id).collect()
    }

    /// Number of units per prunable layer, keyed by node index.
    pub fn layer_unit_counts(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut m = std::collections::BTreeMap::new();
        for u in self.units() {
            *m.entry(u.id.layer).or_insert(0) += 1;
        }
        m
    }

    /// Most units that may be removed from a layer holding `count` units:
    /// residual block layers keep one, everything else keeps 5%.
    pub fn prune_cap(&self, layer: usize, count: usize) -> usize {
        if self.family() == Family::Residual && self.in_residual_block(layer) {
            count.saturating_sub(1)
        } else {
            count * 95 / 100
        }
    }

    /// Channel count of the stream entering node `k`.
    pub(crate) fn stream_channels_into(&self, k: usize) -> usize {
        let mut channels = self.spec.in_channels;
        let mut stack = Vec::new();
        for node in &self.nodes[..k] {
            match &node.kind {
                LayerKind::Conv(c) | LayerKind::Pointwise(c) | LayerKind::Classifier(c) => {
                    channels = c.filters()
                }
                LayerKind::ResidualBegin {
                    projection,
                    input_map,
                } => {
                    stack.push(
                        projection
                            .as_ref()
                            .map(|p| p.conv.filters())
                            .unwrap_or(channels),
                    );
                    if let Some(m) = input_map {
                        channels = m.original - m.pruned.len();
                    }
                }
                LayerKind::ResidualEnd => channels = stack.pop().unwrap_or(channels),
                _ => {}
            }
            if let Some(m) = &node.map_to_zero {
                channels = m.original;
            }
        }
        channels
    }
}
