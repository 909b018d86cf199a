//! Central finite-difference audit of the training objective.
//!
//! The hard antenna threshold is replaced by its frozen linearization at the
//! base point, which has the straight-through value and gradient there, so
//! every parameter can be perturbed without crossing a threshold jump.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{objective_graph, Objective};
use crate::error::{Error, Result};
use crate::nn::{
    extractor_graph, forward_batch, head_graph, threshold, FeatureExtractor, Mode, OutputHead,
    Parameters, RateRequest, Tape, Tensor,
};
use crate::phy::{ChannelMatrix, SystemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Scalar parameters compared.
    pub checked: usize,
    /// Scalar parameters in extractor and head together.
    pub total: usize,
    /// Entries whose analytic and numeric derivatives disagree.
    pub failed: usize,
    /// Largest relative disagreement among entries with a non-negligible
    /// derivative.
    pub worst_relative: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.failed == 0 && self.checked == self.total
    }
}

struct Case<'a> {
    channels: &'a [ChannelMatrix],
    requests: &'a [RateRequest],
    cfg: &'a SystemConfig,
    objective: Objective,
    anchor: Vec<f64>,
}

impl Case<'_> {
    fn loss(
        &self,
        ext: &FeatureExtractor,
        head: &OutputHead,
        grads: bool,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let ep = ext.bind(&mut tape);
        let hp = head.bind(&mut tape);
        let feats = extractor_graph(
            &mut tape,
            &ep,
            ext,
            self.channels,
            self.requests,
            Mode::Eval,
            &mut rng,
        )?;
        let out = head_graph(
            &mut tape,
            &hp,
            &ext.hyper,
            feats,
            self.requests,
            self.cfg,
            Some(&self.anchor),
        )?;
        let (loss, stats) = objective_graph(
            &mut tape,
            &out,
            self.channels,
            self.requests,
            self.objective,
            self.cfg,
            self.channels.len(),
        )?;
        if !grads {
            return Ok((stats.loss, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        Ok((
            stats.loss,
            ep.iter().chain(&hp).map(|&v| g.take(v)).collect(),
        ))
    }
}

/// Compares the analytic gradient of `objective` with central differences of
/// step `step` for every scalar of `ext` and `head`. An entry passes when
/// `|analytic - numeric| <= rel_tol * max(|analytic|, |numeric|) + 1e-8`.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    ext: &FeatureExtractor,
    head: &OutputHead,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
    objective: Objective,
    cfg: &SystemConfig,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) || !(rel_tol > 0.0) {
        return Err(Error::invalid("step and tolerance must be positive"));
    }
    let outs = forward_batch(
        ext,
        head,
        channels,
        requests,
        cfg,
        Mode::Eval,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let anchor = outs
        .iter()
        .flat_map(|o| {
            o.pre_threshold[..cfg.n_tx]
                .iter()
                .map(|&s| threshold(s) - s)
                .collect::<Vec<_>>()
        })
        .collect();
    let case = Case {
        channels,
        requests,
        cfg,
        objective,
        anchor,
    };
    let (_, grads) = case.loss(ext, head, true)?;
    let n_ext = ext.tensors().len();
    let mut report = GradCheckReport {
        checked: 0,
        total: ext.n_params() + head.n_params(),
        failed: 0,
        worst_relative: 0.0,
    };
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut e = ext.clone();
                let mut h = head.clone();
                if t < n_ext {
                    e.tensors_mut()[t].data[i] += delta;
                } else {
                    h.tensors_mut()[t - n_ext].data[i] += delta;
                }
                Ok(case.loss(&e, &h, false)?.0)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let analytic = g.data[i];
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            if err > rel_tol * scale + 1e-8 {
                report.failed += 1;
            }
            if scale > 1e-6 {
                report.worst_relative = report.worst_relative.max(err / scale);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
