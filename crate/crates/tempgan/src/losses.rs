//! Adversarial objectives.
//!
//! The temporal discriminator uses a three-term hinge loss over correctly
//! ordered real triplets, mis-ordered real triplets, and generated
//! triplets; the image discriminator uses the standard two-term hinge; the
//! generator minimizes the negated scores of both its fake outputs. All
//! reductions are arithmetic means over the score lists.
//!
//! Margin convention: real/in-class scores are pushed above +1 via
//! max(0, 1 - s); negatives (mis-ordered and generated) are pushed below
//! -1 via max(0, 1 + s).

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("empty score list for {0}")]
    EmptyScores(&'static str),
}

/// A loss value with its named components; `total` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossBreakdown {
    fn from_components(components: Vec<(&'static str, f64)>) -> Self {
        let total = components.iter().map(|(_, v)| v).sum();
        LossBreakdown { total, components }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|(_, v)| v.is_finite())
    }
}

fn hinge(u: f64) -> f64 {
    u.max(0.0)
}

fn mean_hinge_real(scores: &[f64]) -> f64 {
    scores.iter().map(|&s| hinge(1.0 - s)).sum::<f64>() / scores.len() as f64
}

fn mean_hinge_negative(scores: &[f64]) -> f64 {
    scores.iter().map(|&s| hinge(1.0 + s)).sum::<f64>() / scores.len() as f64
}

/// Temporal-discriminator loss: hinge(1 - s) on true-ordered real triplets,
/// hinge(1 + s) on mis-ordered real triplets and on generated triplets.
pub fn d_temp_loss(
    scores_true: &[f64],
    scores_false: &[f64],
    scores_fake: &[f64],
) -> Result<LossBreakdown, LossError> {
    if scores_true.is_empty() {
        return Err(LossError::EmptyScores("scores_true"));
    }
    if scores_false.is_empty() {
        return Err(LossError::EmptyScores("scores_false"));
    }
    if scores_fake.is_empty() {
        return Err(LossError::EmptyScores("scores_fake"));
    }
    Ok(LossBreakdown::from_components(vec![
        ("real_true_term", mean_hinge_real(scores_true)),
        ("real_false_term", mean_hinge_negative(scores_false)),
        ("fake_term", mean_hinge_negative(scores_fake)),
    ]))
}

/// Image-discriminator hinge loss.
pub fn d_im_loss(scores_real: &[f64], scores_fake: &[f64]) -> Result<LossBreakdown, LossError> {
    if scores_real.is_empty() {
        return Err(LossError::EmptyScores("scores_real"));
    }
    if scores_fake.is_empty() {
        return Err(LossError::EmptyScores("scores_fake"));
    }
    Ok(LossBreakdown::from_components(vec![
        ("real_term", mean_hinge_real(scores_real)),
        ("fake_term", mean_hinge_negative(scores_fake)),
    ]))
}

/// Joint generator loss: mean(-s_temp) + mean(-s_im), optionally weighted.
pub fn g_joint_loss_weighted(
    scores_temp_fake: &[f64],
    scores_im_fake: &[f64],
    temp_weight: f64,
    image_weight: f64,
) -> Result<LossBreakdown, LossError> {
    if scores_temp_fake.is_empty() {
        return Err(LossError::EmptyScores("scores_temp_fake"));
    }
    if scores_im_fake.is_empty() {
        return Err(LossError::EmptyScores("scores_im_fake"));
    }
    let temp = -scores_temp_fake.iter().sum::<f64>() / scores_temp_fake.len() as f64;
    let image = -scores_im_fake.iter().sum::<f64>() / scores_im_fake.len() as f64;
    Ok(LossBreakdown::from_components(vec![
        ("temp_term", temp_weight * temp),
        ("image_term", image_weight * image),
    ]))
}

/// Joint generator loss with both terms at weight 1.
pub fn g_joint_loss(
    scores_temp_fake: &[f64],
    scores_im_fake: &[f64],
) -> Result<LossBreakdown, LossError> {
    g_joint_loss_weighted(scores_temp_fake, scores_im_fake, 1.0, 1.0)
}

/// d/ds of mean hinge(1 - s): -1/n where 1 - s > 0, else 0.
pub fn grad_hinge_real(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|&s| if 1.0 - s > 0.0 { -1.0 / n } else { 0.0 })
        .collect()
}

/// d/ds of mean hinge(1 + s): 1/n where 1 + s > 0, else 0.
pub fn grad_hinge_negative(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|&s| if 1.0 + s > 0.0 { 1.0 / n } else { 0.0 })
        .collect()
}

/// d/ds of weight * mean(-s): -weight/n for every score.
pub fn grad_negated_mean(scores: &[f64], weight: f64) -> Vec<f64> {
    let n = scores.len() as f64;
    scores.iter().map(|_| -weight / n).collect()
}
