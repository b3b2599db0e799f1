//! Per-candidate feature rows of a focus node.
//!
//! Every entry is computed from the node's own sub-MILP (its path of bound
//! changes and the LP solutions along that path) and the incumbent value at
//! the moment it was selected. Nothing outside the root-to-node path is
//! read, so two trees that differ only in sibling subtrees yield identical
//! rows.

use crate::bnb::{BnbError, NodeId, SearchTree};
use crate::lp::EPS_INT;

pub const NUM_FEATURES: usize = 12;

pub type FeatureRow = [f64; NUM_FEATURES];

/// One row per fractional candidate, in ascending variable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub candidates: Vec<usize>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row position of variable `var`.
    pub fn position(&self, var: usize) -> Option<usize> {
        self.candidates.binary_search(&var).ok()
    }
}

/// Features of open node `id` against the tree's current incumbent.
pub fn featurize(tree: &SearchTree, id: NodeId) -> Result<FeatureMatrix, BnbError> {
    let candidates = tree.fractional_candidates(id)?;
    Ok(featurize_at(tree, id, &candidates, tree.gub))
}

/// Features of a node that has been selected, using the incumbent value
/// recorded at its selection. Matches what [`featurize`] returned then.
pub fn featurize_selected(tree: &SearchTree, id: NodeId) -> FeatureMatrix {
    let node = &tree.nodes[id];
    let gub = node.incumbent_at_selection.expect("node was selected");
    let x = node.lp.point.as_ref().expect("selected node has an LP point");
    let candidates: Vec<usize> = tree
        .instance()
        .integer
        .iter()
        .copied()
        .filter(|&j| (x[j] - x[j].round()).abs() > EPS_INT)
        .collect();
    featurize_at(tree, id, &candidates, gub)
}

/// Objective gain per unit fractionality along the path to a node, averaged
/// per variable and direction.
struct PathPseudocosts {
    up: Vec<(f64, u32)>,
    down: Vec<(f64, u32)>,
}

impl PathPseudocosts {
    fn collect(tree: &SearchTree, id: NodeId, scale: f64) -> Self {
        let n = tree.instance().num_vars;
        let mut pc = Self {
            up: vec![(0.0, 0); n],
            down: vec![(0.0, 0); n],
        };
        let mut cursor = tree.nodes[id].parent;
        while let Some(a) = cursor {
            let anc = &tree.nodes[a];
            if let (Some(var), Some((minus, plus)), Some(obj)) =
                (anc.branch_var, anc.children, anc.objective())
            {
                let x = anc.lp.point.as_ref().expect("branched node has a point")[var];
                let sides = [
                    (minus, x - x.floor(), &mut pc.down),
                    (plus, x.ceil() - x, &mut pc.up),
                ];
                for (child, frac, acc) in sides {
                    if let Some(child_obj) = tree.nodes[child].objective() {
                        let gain = (child_obj - obj).max(0.0) / frac / scale;
                        acc[var].0 += gain;
                        acc[var].1 += 1;
                    }
                }
            }
            cursor = anc.parent;
        }
        pc
    }

    fn mean(acc: (f64, u32)) -> f64 {
        if acc.1 == 0 {
            0.0
        } else {
            acc.0 / acc.1 as f64
        }
    }
}

fn featurize_at(tree: &SearchTree, id: NodeId, candidates: &[usize], gub: f64) -> FeatureMatrix {
    let inst = tree.instance();
    let node = &tree.nodes[id];
    let x = node.lp.point.as_ref().expect("node has an LP point");
    let obj = node.objective().expect("node LP is optimal");
    let root_obj = tree.root_objective().expect("root LP is optimal");
    let n = inst.num_vars as f64;
    let m = inst.num_cons().max(1) as f64;
    let c_max = inst.objective.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
    let counts = inst.column_counts();
    let (lower, upper) = tree.node_bounds(id);
    let scale = 1.0 + root_obj.abs();
    let pc = PathPseudocosts::collect(tree, id, scale);
    let has_incumbent = gub.is_finite();
    let gap = if has_incumbent {
        (gub - obj) / (1.0 + gub.abs())
    } else {
        1.0
    };

    let rows = candidates
        .iter()
        .map(|&j| {
            let range = upper[j] - lower[j];
            [
                (x[j] - x[j].round()).abs(),
                x[j] - x[j].floor(),
                if c_max > 0.0 { inst.objective[j] / c_max } else { 0.0 },
                counts[j] as f64 / m,
                node.depth as f64 / n,
                (obj - root_obj) / scale,
                gap,
                if has_incumbent { 1.0 } else { 0.0 },
                range / (1.0 + range),
                PathPseudocosts::mean(pc.up[j]),
                PathPseudocosts::mean(pc.down[j]),
                candidates.len() as f64 / n,
            ]
        })
        .collect();
    FeatureMatrix {
        candidates: candidates.to_vec(),
        rows,
    }
}
