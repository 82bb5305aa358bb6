//! Training objectives for pinhole-to-panorama adaptation: supervised
//! segmentation loss, self-training on argmax pseudo labels, and class-wise
//! feature aggregation with an epoch-mixed center bank.

use numkit::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DatrError, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;
/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
pub const POLY_POWER: f64 = 0.9;

/// Mean `-ln p[label]` over non-ignored pixels of a `[n, K]` probability map.
/// Zero when every pixel is ignored.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    Ok(tape.nll(probs, labels, IGNORE, LOG_FLOOR)?)
}

/// Same loss taken directly from logits (fused softmax and log).
pub fn seg_loss_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    Ok(tape.softmax_cross_entropy(logits, labels, IGNORE)?)
}

/// True when a label set has no supervised pixel (loss defined as 0).
pub fn all_ignored(labels: &[u8]) -> bool {
    labels.iter().all(|&l| l == IGNORE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
}

/// Per-pixel argmax of a `[n, K]` probability map; pixels whose top
/// probability is below `threshold` become [`IGNORE`].
pub fn make_pseudo_labels<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<PseudoLabelMap> {
    let k = probs.last_dim();
    if probs.shape().len() != 2 || k == 0 || k > IGNORE as usize {
        return Err(DatrError::Domain(format!("probability map {:?} must be [n, K]", probs.shape())));
    }
    let mut labels = Vec::with_capacity(probs.rows());
    let mut confidence = Vec::with_capacity(probs.rows());
    for row in probs.data().chunks(k) {
        let (arg, best) = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |(ai, av), (i, &v)| if v > av { (i, v) } else { (ai, av) });
        let c = best.to_f64();
        labels.push(if c < threshold { IGNORE } else { arg as u8 });
        confidence.push(c);
    }
    Ok(PseudoLabelMap { labels, confidence })
}

/// Self-training loss on pseudo labels.
pub fn ss_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, pl: &PseudoLabelMap) -> Result<Var> {
    seg_loss(tape, probs, &pl.labels)
}

/// Nearest-neighbor resampling of a label map (pixel centers).
pub fn nearest_labels(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    debug_assert_eq!(labels.len(), h * w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

/// Per-class mean feature of a `[n, D]` map. Absent classes are zero and
/// flagged invalid.
pub fn class_centers<T: Scalar>(feat: &Tensor<T>, labels: &[u8], k: usize) -> (Tensor<T>, Vec<bool>) {
    let d = feat.last_dim();
    let mut sums = vec![T::ZERO; k * d];
    let mut counts = vec![0usize; k];
    for (row, &lab) in feat.data().chunks(d).zip(labels) {
        let l = lab as usize;
        if l < k {
            counts[l] += 1;
            for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = T::ONE / T::from_usize(n);
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s *= inv);
        }
    }
    let valid = counts.iter().map(|&n| n > 0).collect();
    (Tensor::from_vec(&[k, d], sums).expect("shape"), valid)
}

/// Differentiable class centers pooled over several `[n_b, D]` maps:
/// `centers = sum_b A_b F_b` where `A_b[k, n] = 1 / count_k` for pixels of
/// class `k`.
pub fn class_centers_tape<T: Scalar>(tape: &mut Tape<T>, maps: &[(Var, &[u8])], k: usize) -> Result<(Var, Vec<bool>)> {
    let mut counts = vec![0usize; k];
    for (_, labels) in maps {
        for &l in labels.iter() {
            if (l as usize) < k {
                counts[l as usize] += 1;
            }
        }
    }
    let mut acc: Option<Var> = None;
    for &(f, labels) in maps {
        let n = labels.len();
        if tape.shape(f).first() != Some(&n) {
            return Err(DatrError::Domain(format!(
                "feature map {:?} does not match {n} labels",
                tape.shape(f)
            )));
        }
        let mut a = vec![T::ZERO; k * n];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l < k {
                a[l * n + i] = T::ONE / T::from_usize(counts[l]);
            }
        }
        let a = tape.constant(Tensor::from_vec(&[k, n], a)?);
        let c = tape.matmul(a, f)?;
        acc = Some(match acc {
            None => c,
            Some(prev) => tape.add(prev, c)?,
        });
    }
    let acc = acc.ok_or_else(|| DatrError::Domain("no feature maps for class centers".into()))?;
    Ok((acc, counts.iter().map(|&n| n > 0).collect()))
}

/// Source and target class centers carried across mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenterBank {
    pub classes: usize,
    pub dim: usize,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub valid_source: Vec<bool>,
    pub valid_target: Vec<bool>,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Mixing weights `(1 - 1/e, 1/e)` for stored and current centers.
pub fn mix_coefficients(e: usize) -> Result<(f64, f64)> {
    if e < 1 {
        return Err(DatrError::Config("center mixing epoch must be >= 1".into()));
    }
    let b = 1.0 / e as f64;
    Ok((1.0 - b, b))
}

impl ClassCenterBank {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            source: vec![0.0; classes * dim],
            target: vec![0.0; classes * dim],
            valid_source: vec![false; classes],
            valid_target: vec![false; classes],
            epoch: 1,
        }
    }

    pub fn centers(&self, domain: Domain) -> (&[f64], &[bool]) {
        match domain {
            Domain::Source => (&self.source, &self.valid_source),
            Domain::Target => (&self.target, &self.valid_target),
        }
    }

    fn centers_mut(&mut self, domain: Domain) -> (&mut Vec<f64>, &mut Vec<bool>) {
        match domain {
            Domain::Source => (&mut self.source, &mut self.valid_source),
            Domain::Target => (&mut self.target, &mut self.valid_target),
        }
    }

    fn check(&self, current: &[f64], valid: &[bool]) -> Result<()> {
        if current.len() != self.classes * self.dim || valid.len() != self.classes {
            return Err(DatrError::Domain(format!(
                "center update of {} values / {} flags for a {}x{} bank",
                current.len(),
                valid.len(),
                self.classes,
                self.dim
            )));
        }
        Ok(())
    }

    /// Mix one domain's current centers into the bank.
    pub fn update_domain(&mut self, domain: Domain, current: &[f64], valid: &[bool], e: usize) -> Result<()> {
        self.check(current, valid)?;
        let (a, b) = mix_coefficients(e)?;
        let d = self.dim;
        let (stored, stored_valid) = self.centers_mut(domain);
        for c in 0..valid.len() {
            if !valid[c] {
                continue;
            }
            let (a, b) = if stored_valid[c] { (a, b) } else { (0.0, 1.0) };
            for (s, &v) in stored[c * d..(c + 1) * d].iter_mut().zip(&current[c * d..(c + 1) * d]) {
                *s = a * *s + b * v;
            }
            stored_valid[c] = true;
        }
        self.epoch = e;
        Ok(())
    }

    /// Classes valid in both domains.
    pub fn shared_classes(&self) -> Vec<usize> {
        (0..self.classes)
            .filter(|&c| self.valid_source[c] && self.valid_target[c])
            .collect()
    }

    /// `sum_i ||S_i - T_i||^2` over shared classes.
    pub fn center_distance(&self) -> f64 {
        let d = self.dim;
        self.shared_classes()
            .into_iter()
            .map(|c| {
                self.source[c * d..(c + 1) * d]
                    .iter()
                    .zip(&self.target[c * d..(c + 1) * d])
                    .map(|(s, t)| (s - t) * (s - t))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Update both domains of a bank at epoch `e`.
pub fn bank_update(
    bank: &mut ClassCenterBank,
    new_s: &[f64],
    valid_s: &[bool],
    new_t: &[f64],
    valid_t: &[bool],
    e: usize,
) -> Result<()> {
    bank.update_domain(Domain::Source, new_s, valid_s, e)?;
    bank.update_domain(Domain::Target, new_t, valid_t, e)
}

/// Mean over shared classes of the channel-mean squared center difference.
pub fn cfa_loss(bank: &ClassCenterBank) -> f64 {
    let shared = bank.shared_classes();
    if shared.is_empty() {
        return 0.0;
    }
    let d = bank.dim;
    let total: f64 = shared
        .iter()
        .map(|&c| {
            bank.source[c * d..(c + 1) * d]
                .iter()
                .zip(&bank.target[c * d..(c + 1) * d])
                .map(|(s, t)| (s - t) * (s - t))
                .sum::<f64>()
                / d as f64
        })
        .sum();
    total / shared.len() as f64
}

/// Differentiable mixture of stored (constant) and current centers, i.e.
/// the value `update_domain` would store. Returns the mixed `[K, D]` centers
/// and their validity.
pub fn mixed_centers_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &ClassCenterBank,
    domain: Domain,
    current: Var,
    valid: &[bool],
    e: usize,
) -> Result<(Var, Vec<bool>)> {
    let (stored, stored_valid) = bank.centers(domain);
    let (a, b) = mix_coefficients(e)?;
    let (k, d) = (bank.classes, bank.dim);
    if tape.shape(current) != [k, d] || valid.len() != k {
        return Err(DatrError::Domain(format!(
            "current centers {:?} do not match a {k}x{d} bank",
            tape.shape(current)
        )));
    }
    let mut prev = vec![T::ZERO; k * d];
    let mut cur_w = vec![T::ZERO; k * d];
    let mut out_valid = vec![false; k];
    for c in 0..k {
        let (wa, wb) = match (valid[c], stored_valid[c]) {
            (true, true) => (a, b),
            (true, false) => (0.0, 1.0),
            (false, true) => (1.0, 0.0),
            (false, false) => (0.0, 0.0),
        };
        out_valid[c] = valid[c] || stored_valid[c];
        for j in 0..d {
            prev[c * d + j] = T::from_f64(wa * stored[c * d + j]);
            cur_w[c * d + j] = T::from_f64(wb);
        }
    }
    let prev = tape.constant(Tensor::from_vec(&[k, d], prev)?);
    let cur_w = tape.constant(Tensor::from_vec(&[k, d], cur_w)?);
    let scaled = tape.mul(current, cur_w)?;
    Ok((tape.add(prev, scaled)?, out_valid))
}

/// Differentiable counterpart of [`cfa_loss`] on `[K, D]` center tensors.
pub fn cfa_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    source: Var,
    valid_s: &[bool],
    target: Var,
    valid_t: &[bool],
) -> Result<Var> {
    let shape = tape.shape(source).to_vec();
    if shape.len() != 2 || tape.shape(target) != shape.as_slice() {
        return Err(DatrError::Domain("center tensors must share a [K, D] shape".into()));
    }
    let (k, d) = (shape[0], shape[1]);
    let shared: Vec<bool> = (0..k).map(|c| valid_s[c] && valid_t[c]).collect();
    let num = shared.iter().filter(|&&v| v).count();
    let mut w = vec![T::ZERO; k * d];
    if num > 0 {
        let weight = T::from_f64(1.0 / (num * d) as f64);
        for c in (0..k).filter(|&c| shared[c]) {
            w[c * d..(c + 1) * d].fill(weight);
        }
    }
    let w = tape.constant(Tensor::from_vec(&[k, d], w)?);
    let diff = tape.sub(source, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w)?;
    Ok(tape.sum(weighted)?)
}

/// Polynomial decay `base_lr * (1 - step / total)^0.9`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    base_lr * (1.0 - frac).powf(POLY_POWER)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourceOnly,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SourceOnly => "source",
            Phase::Adapt => "adapt",
        }
    }
}

/// Loss weights of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ss: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ss: 1.0,
            lambda_f: 0.1,
        }
    }
}

/// `L_seg` in the source-only phase, `L_seg + l_ss L_ss + l_f L_f` while
/// adapting. Terms with zero weight are not added to the graph.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    phase: Phase,
    weights: LossWeights,
    seg: Var,
    ss: Option<Var>,
    f: Option<Var>,
) -> Result<Var> {
    let mut loss = seg;
    if phase == Phase::Adapt {
        for (w, term) in [(weights.lambda_ss, ss), (weights.lambda_f, f)] {
            if let (true, Some(t)) = (w != 0.0, term) {
                let s = tape.scale(t, w)?;
                loss = tape.add(loss, s)?;
            }
        }
    }
    Ok(loss)
}
