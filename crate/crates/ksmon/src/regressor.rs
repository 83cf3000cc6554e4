//! The regressor abstraction the monitor works with: a fitted tree or
//! forest, tagged with the configuration that produced it, plus the
//! equally-weighted ensemble prediction over a history of such regressors.
//!
//! Serialization is a versioned JSON document listing each tree as flat
//! parent-linked node records, so states survive process restarts and can be
//! resumed bit-exactly.

use serde::{Deserialize, Serialize};

use crate::data::ObservationBatch;
use crate::error::{Error, Result};
use crate::forest::{forest_fit, RandomForest};
use crate::tree::{tree_fit, FitConfig, NodeRecord, RegressionTree, RegressorKind};

/// Schema version of the serialized regressor document.
pub const REGRESSOR_SCHEMA_VERSION: u32 = 1;

/// A fitted model: single CART tree or random forest.
#[derive(Debug, Clone)]
pub enum RegressorModel {
    Tree(RegressionTree),
    Forest(RandomForest),
}

/// A fitted regressor together with the [`FitConfig`] that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RegressorDoc", into = "RegressorDoc")]
pub struct FittedRegressor {
    config: FitConfig,
    model: RegressorModel,
}

impl FittedRegressor {
    /// Fit a regressor of the kind named by `config.regressor_kind`.
    pub fn fit(batch: &ObservationBatch, config: &FitConfig) -> Result<Self> {
        let model = match config.regressor_kind {
            RegressorKind::Tree => RegressorModel::Tree(tree_fit(batch, config)?),
            RegressorKind::Forest => RegressorModel::Forest(forest_fit(batch, config)?),
        };
        Ok(FittedRegressor { config: config.clone(), model })
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn model(&self) -> &RegressorModel {
        &self.model
    }

    /// Number of predictors the model expects.
    pub fn p(&self) -> usize {
        match &self.model {
            RegressorModel::Tree(t) => t.p(),
            RegressorModel::Forest(f) => f.p(),
        }
    }

    /// Predict the response at one point.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        match &self.model {
            RegressorModel::Tree(t) => t.predict_one(x),
            RegressorModel::Forest(f) => f.predict_one(x),
        }
    }

    /// Add `scale * prediction` into `out[i]` for every row of the
    /// row-major matrix `xs`. Rows must already be validated (`p` columns,
    /// finite).
    pub(crate) fn accumulate_predictions(&self, xs: &[f64], out: &mut [f64], scale: f64) {
        match &self.model {
            RegressorModel::Tree(t) => t.accumulate_predictions(xs, out, scale),
            RegressorModel::Forest(f) => f.accumulate_predictions(xs, out, scale),
        }
    }
}

/// Equally weighted mean prediction over every regressor in `history`.
///
/// Errors with an invalid-state error when the history is empty, and
/// propagates dimension mismatches from the members.
pub fn ensemble_mean_predict<'a, I>(history: I, x: &[f64]) -> Result<f64>
where
    I: IntoIterator<Item = &'a FittedRegressor>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for regressor in history {
        sum += regressor.predict_one(x)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid_state("ensemble prediction over an empty history"));
    }
    Ok(sum / count as f64)
}

/// Serialize a regressor to its versioned JSON document.
pub fn regressor_to_json(regressor: &FittedRegressor) -> Result<String> {
    Ok(serde_json::to_string(regressor)?)
}

/// Parse a regressor from its versioned JSON document, validating the
/// schema version and tree topology.
pub fn regressor_from_json(json: &str) -> Result<FittedRegressor> {
    Ok(serde_json::from_str(json)?)
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SideDoc {
    Left,
    Right,
}

/// One tree node in the serialized document. `parent`/`side` are absent on
/// the root; `feature`/`threshold` are present on split nodes;
/// `value`/`count` on leaves.
#[derive(Serialize, Deserialize)]
struct NodeDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    side: Option<SideDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelDoc {
    Tree { nodes: Vec<NodeDoc> },
    Forest { trees: Vec<Vec<NodeDoc>>, tree_seeds: Vec<u64> },
}

#[derive(Serialize, Deserialize)]
struct RegressorDoc {
    schema_version: u32,
    p: usize,
    config: FitConfig,
    model: ModelDoc,
}

fn tree_to_docs(tree: &RegressionTree) -> Vec<NodeDoc> {
    tree.node_records()
        .into_iter()
        .map(|rec| NodeDoc {
            parent: rec.parent,
            side: rec.parent.map(|_| if rec.right_side { SideDoc::Right } else { SideDoc::Left }),
            feature: rec.split.map(|(f, _)| f),
            threshold: rec.split.map(|(_, thr)| thr),
            value: rec.leaf.map(|(v, _)| v),
            count: rec.leaf.map(|(_, c)| c),
        })
        .collect()
}

fn tree_from_docs(p: usize, docs: &[NodeDoc]) -> Result<RegressionTree> {
    let records: Vec<NodeRecord> = docs
        .iter()
        .map(|d| {
            let split = match (d.feature, d.threshold) {
                (Some(f), Some(t)) => Some((f, t)),
                (None, None) => None,
                _ => {
                    return Err(Error::malformed(
                        "split node must carry both feature and threshold",
                    ))
                }
            };
            let leaf = match (d.value, d.count) {
                (Some(v), Some(c)) => Some((v, c)),
                (None, None) => None,
                _ => return Err(Error::malformed("leaf node must carry both value and count")),
            };
            if d.parent.is_some() != d.side.is_some() {
                return Err(Error::malformed("non-root node must carry both parent and side"));
            }
            Ok(NodeRecord {
                parent: d.parent,
                right_side: matches!(d.side, Some(SideDoc::Right)),
                split,
                leaf,
            })
        })
        .collect::<Result<_>>()?;
    RegressionTree::from_node_records(p, &records)
}

impl From<FittedRegressor> for RegressorDoc {
    fn from(r: FittedRegressor) -> RegressorDoc {
        let p = r.p();
        let model = match &r.model {
            RegressorModel::Tree(t) => ModelDoc::Tree { nodes: tree_to_docs(t) },
            RegressorModel::Forest(f) => ModelDoc::Forest {
                trees: f.trees().iter().map(tree_to_docs).collect(),
                tree_seeds: f.tree_seeds().to_vec(),
            },
        };
        RegressorDoc { schema_version: REGRESSOR_SCHEMA_VERSION, p, config: r.config, model }
    }
}

impl TryFrom<RegressorDoc> for FittedRegressor {
    type Error = Error;

    fn try_from(doc: RegressorDoc) -> Result<FittedRegressor> {
        if doc.schema_version != REGRESSOR_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: doc.schema_version,
                supported: REGRESSOR_SCHEMA_VERSION,
            });
        }
        doc.config.validate(doc.p)?;
        let model = match doc.model {
            ModelDoc::Tree { nodes } => RegressorModel::Tree(tree_from_docs(doc.p, &nodes)?),
            ModelDoc::Forest { trees, tree_seeds } => {
                let trees: Vec<RegressionTree> =
                    trees.iter().map(|docs| tree_from_docs(doc.p, docs)).collect::<Result<_>>()?;
                RegressorModel::Forest(RandomForest::from_parts(trees, tree_seeds)?)
            }
        };
        Ok(FittedRegressor { config: doc.config, model })
    }
}
