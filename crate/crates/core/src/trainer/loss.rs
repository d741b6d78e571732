//! Per-step losses and their gradients with respect to the head outputs.

use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingIndex, EMBED_DIM};
use crate::error::{Error, Result};
use crate::likelihoods::{log_softmax, MixtureOfLogistics, MolGrad};
use crate::model::StepPrediction;
use crate::scene::NormalizedTransform7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub stop_weight: f64,
    pub embedding_weight: f64,
    pub translation_weight: f64,
    pub rotation_weight: f64,
    pub size_weight: f64,
    /// Extra factor on the stop loss of examples whose label is "stop".
    pub stop_positive_weight: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_smoothing: 0.1,
            stop_weight: 1.0,
            embedding_weight: 1.0,
            translation_weight: 1.0,
            rotation_weight: 1.0,
            size_weight: 1.0,
            stop_positive_weight: None,
        }
    }
}

/// What the next step should produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingTarget {
    Stop,
    Instance {
        asset_id: String,
        transform: NormalizedTransform7,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stop_loss: f64,
    pub embedding_loss: f64,
    pub translation_nll: f64,
    pub rotation_nll: f64,
    pub size_nll: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.stop_loss,
            self.embedding_loss,
            self.translation_nll,
            self.rotation_nll,
            self.size_nll,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.stop_loss += s * other.stop_loss;
        self.embedding_loss += s * other.embedding_loss;
        self.translation_nll += s * other.translation_nll;
        self.rotation_nll += s * other.rotation_nll;
        self.size_nll += s * other.size_nll;
        self.total += s * other.total;
    }
}

/// Target resolved against the index: row and normalized transform values.
pub(crate) enum ResolvedTarget {
    Stop,
    Instance { row: usize, transform: [f64; 7] },
}

pub(crate) fn resolve_target(target: &TrainingTarget, index: &EmbeddingIndex) -> Result<ResolvedTarget> {
    match target {
        TrainingTarget::Stop => Ok(ResolvedTarget::Stop),
        TrainingTarget::Instance {
            asset_id,
            transform,
        } => {
            let row = index.position(asset_id).ok_or_else(|| {
                Error::NotFound(format!("target asset `{asset_id}` is not in the index"))
            })?;
            Ok(ResolvedTarget::Instance {
                row,
                transform: transform.values,
            })
        }
    }
}

/// Gradients of the weighted total with respect to each head output.
pub(crate) struct HeadGrads {
    pub stop_logits: [f64; 2],
    /// Present for instance targets only, as are the mixtures.
    pub embedding: Option<Vec<f64>>,
    /// Translation x3, rotation, size x3.
    pub mixtures: Vec<MolGrad>,
}

/// Mixtures in cascade order: three translation, one rotation, three size.
pub(crate) fn evaluate(
    stop_logits: [f64; 2],
    embedding: &[f64],
    mixtures: Option<&[MixtureOfLogistics]>,
    target: &ResolvedTarget,
    index: &EmbeddingIndex,
    cfg: &LossConfig,
) -> Result<(LossReport, HeadGrads)> {
    let mut report = LossReport::default();
    let is_stop = matches!(target, ResolvedTarget::Stop);
    let eps = cfg.label_smoothing;
    let label = usize::from(is_stop);
    let q = |c: usize| if c == label { 1.0 - eps + 0.5 * eps } else { 0.5 * eps };
    let lp = log_softmax(&stop_logits);
    let mut w_stop = cfg.stop_weight;
    if is_stop {
        w_stop *= cfg.stop_positive_weight.unwrap_or(1.0);
    }
    report.stop_loss = -(q(0) * lp[0] + q(1) * lp[1]);
    let stop_grad = [
        w_stop * (lp[0].exp() - q(0)),
        w_stop * (lp[1].exp() - q(1)),
    ];
    report.total = w_stop * report.stop_loss;
    let mut grads = HeadGrads {
        stop_logits: stop_grad,
        embedding: None,
        mixtures: Vec::new(),
    };
    let ResolvedTarget::Instance { row, transform } = target else {
        return Ok((report, grads));
    };
    if embedding.len() != EMBED_DIM {
        return Err(Error::Shape(format!(
            "predicted embedding has {} components",
            embedding.len()
        )));
    }
    let scores: Vec<f64> = (0..index.len())
        .map(|i| {
            index
                .row(i)
                .iter()
                .zip(embedding)
                .map(|(&a, &b)| a as f64 * b)
                .sum()
        })
        .collect();
    let ls = log_softmax(&scores);
    report.embedding_loss = -ls[*row];
    let mut g = vec![0f64; EMBED_DIM];
    for (i, l) in ls.iter().enumerate() {
        let coef = l.exp() - if i == *row { 1.0 } else { 0.0 };
        if coef != 0.0 {
            for (gj, &m) in g.iter_mut().zip(index.row(i)) {
                *gj += coef * m as f64;
            }
        }
    }
    g.iter_mut().for_each(|x| *x *= cfg.embedding_weight);
    grads.embedding = Some(g);
    report.total += cfg.embedding_weight * report.embedding_loss;

    let mixtures = mixtures.ok_or_else(|| {
        Error::InvalidArgument("instance target needs attribute distributions".into())
    })?;
    if mixtures.len() != 7 {
        return Err(Error::Shape(format!("{} attribute mixtures, expected 7", mixtures.len())));
    }
    // cascade order maps onto transform components tx, ty, tz, yaw, sx, sy, sz
    let comps = [0, 1, 2, 6, 3, 4, 5];
    let weights = [
        cfg.translation_weight,
        cfg.translation_weight,
        cfg.translation_weight,
        cfg.rotation_weight,
        cfg.size_weight,
        cfg.size_weight,
        cfg.size_weight,
    ];
    for (a, mix) in mixtures.iter().enumerate() {
        let (nll, mut mg) = mix.nll_and_grad(transform[comps[a]]);
        match a {
            0..=2 => report.translation_nll += nll,
            3 => report.rotation_nll += nll,
            _ => report.size_nll += nll,
        }
        report.total += weights[a] * nll;
        for v in mg
            .logits
            .iter_mut()
            .chain(mg.means.iter_mut())
            .chain(mg.log_scales.iter_mut())
        {
            *v *= weights[a];
        }
        grads.mixtures.push(mg);
    }
    Ok((report, grads))
}

/// Losses of a full prediction against a target.
pub fn compute_losses(
    pred: &StepPrediction,
    target: &TrainingTarget,
    index: &EmbeddingIndex,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let resolved = resolve_target(target, index)?;
    let emb: Vec<f64> = pred.predicted_embedding.iter().map(|&x| x as f64).collect();
    let mixtures: Vec<MixtureOfLogistics> = pred
        .translation
        .iter()
        .chain([&pred.rotation])
        .chain(pred.size.iter())
        .cloned()
        .collect();
    Ok(evaluate(pred.stop_logits, &emb, Some(&mixtures), &resolved, index, cfg)?.0)
}
