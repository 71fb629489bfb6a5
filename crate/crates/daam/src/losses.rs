//! The five training losses and their unweighted total.
//!
//! Each summed loss is normalized per batch (mean over the samples it runs
//! over) so gradient magnitudes do not scale with batch size. Every
//! probability is clamped into `[1e-12, 1 - 1e-12]` before its log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ForwardVars;
use crate::synthetic::Domain;
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_EPS: f64 = 1e-12;
/// Lower clamp on embedding norms in the orthogonality term.
pub const NORM_EPS: f64 = 1e-12;

fn neg_log(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let l = g.log(c)?;
    g.scale(l, -1.0)
}

/// Mean of `-log p_occ` over every sample of both domains.
pub fn domain_similarity_loss(g: &mut Graph, p_occ: Var) -> Result<Var> {
    if g.value(p_occ).numel() == 0 {
        return Err(Error::Data("domain similarity loss on an empty batch".into()));
    }
    let nl = neg_log(g, p_occ)?;
    g.mean(nl)
}

/// Mean cross-entropy of `[n, classes]` probability rows against labels.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = g.gather(probs, labels)?;
    let nl = neg_log(g, picked)?;
    g.mean(nl)
}

/// Source identity cross-entropy, mean over source rows.
pub fn reid_source_loss(g: &mut Graph, p_src_id: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, p_src_id, labels)
}

/// `Σ w_i · (-log p(ỹ_i | x_i)) / n_target`.
pub fn reid_target_loss(g: &mut Graph, p_tgt_id: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    if weights.len() != labels.len() {
        return Err(Error::dim("reid_target_loss", format!("{} weights for {} labels", weights.len(), labels.len())));
    }
    let picked = g.gather(p_tgt_id, labels)?;
    let nl = neg_log(g, picked)?;
    let w = g.constant(Tensor::from_vec(weights.to_vec()));
    let weighted = g.mul(nl, w)?;
    g.mean(weighted)
}

/// Domain classifier cross-entropy: `-log p^s` on source rows and `-log p^t`
/// on target rows, averaged over all rows.
pub fn domain_specific_loss(g: &mut Graph, p_domain: Var, domains: &[Domain]) -> Result<Var> {
    let labels: Vec<usize> = domains.iter().map(|d| d.index()).collect();
    cross_entropy(g, p_domain, &labels)
}

/// Mean over rows of `(f_sh · f_sp) / (‖f_sh‖² ‖f_sp‖²)`, or of the cosine
/// similarity when `cosine` is set. Squared norms are clamped below by
/// [`NORM_EPS`].
pub fn orthogonality_loss(g: &mut Graph, f_sh: Var, f_sp: Var, cosine: bool) -> Result<Var> {
    let dot = g.dot(f_sh, f_sp)?;
    let n_sh = g.l2_norm_sq(f_sh)?;
    let n_sh = g.clamp(n_sh, NORM_EPS, f64::MAX)?;
    let n_sp = g.l2_norm_sq(f_sp)?;
    let n_sp = g.clamp(n_sp, NORM_EPS, f64::MAX)?;
    let denom = g.mul(n_sh, n_sp)?;
    let denom = if cosine { g.sqrt(denom)? } else { denom };
    let ratio = g.div(dot, denom)?;
    g.mean(ratio)
}

/// Which terms enter the total, plus loss-level variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub domain_similarity: bool,
    pub reid_source: bool,
    pub reid_target: bool,
    pub domain_specific: bool,
    pub orthogonality: bool,
    /// Cosine similarity instead of the squared-norm ratio.
    pub orth_cosine: bool,
    /// `false` sets every target weight to 1.
    pub confidence_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            domain_similarity: true,
            reid_source: true,
            reid_target: true,
            domain_specific: true,
            orthogonality: true,
            orth_cosine: false,
            confidence_weights: true,
        }
    }
}

impl LossConfig {
    /// Source-only pretraining objective.
    pub fn pretrain() -> Self {
        LossConfig {
            domain_similarity: false,
            reid_source: true,
            reid_target: false,
            domain_specific: false,
            orthogonality: false,
            ..Default::default()
        }
    }
}

/// Labels for one mixed batch. Rows of the forward pass are addressed by
/// index; source rows carry identity labels, target rows weak labels and
/// confidence weights.
#[derive(Clone, Debug, Default)]
pub struct BatchLossInputs {
    pub domains: Vec<Domain>,
    pub source_rows: Vec<usize>,
    pub source_labels: Vec<usize>,
    pub target_rows: Vec<usize>,
    pub target_labels: Vec<usize>,
    pub target_weights: Vec<f64>,
}

impl BatchLossInputs {
    pub fn validate(&self, n_source_ids: usize, n_clusters: usize) -> Result<()> {
        if self.source_rows.len() != self.source_labels.len()
            || self.target_rows.len() != self.target_labels.len()
            || self.target_rows.len() != self.target_weights.len()
        {
            return Err(Error::Data("batch label/row counts disagree".into()));
        }
        if let Some(&y) = self.source_labels.iter().find(|&&y| y >= n_source_ids) {
            return Err(Error::Data(format!("source label {y} out of range for {n_source_ids} identities")));
        }
        if let Some(&y) = self.target_labels.iter().find(|&&y| y >= n_clusters) {
            return Err(Error::Data(format!("weak label {y} out of range for K = {n_clusters}")));
        }
        if let Some(&w) = self.target_weights.iter().find(|&&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Data(format!("target weight {w} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub domain_similarity: f64,
    pub reid_source: f64,
    pub reid_target: f64,
    pub domain_specific: f64,
    pub orthogonality: f64,
    pub total: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// A source-dependent term was requested on a batch with no source rows.
    pub missing_source: bool,
    /// The domain term saw only one domain.
    pub single_domain: bool,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iteration,epoch,step,l_ds,l_reid_s,l_reid_t,l_dsp,l_orth,l_total";

    pub fn csv_row(&self, iteration: usize, epoch: usize, step: usize) -> String {
        format!(
            "{iteration},{epoch},{step},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.domain_similarity,
            self.reid_source,
            self.reid_target,
            self.domain_specific,
            self.orthogonality,
            self.total
        )
    }
}

/// Builds the total loss node for one batch and records its breakdown.
pub fn total_loss(
    g: &mut Graph,
    vars: &ForwardVars,
    inputs: &BatchLossInputs,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut b = LossBreakdown { n_source: inputs.source_rows.len(), n_target: inputs.target_rows.len(), ..Default::default() };
    if inputs.domains.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut terms = Vec::new();
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::Config(format!("forward pass did not compute {what}")));

    if cfg.domain_similarity {
        let t = domain_similarity_loss(g, need(vars.p_occ, "p_occ")?)?;
        b.domain_similarity = g.value(t).item();
        terms.push(t);
    }
    if cfg.reid_source {
        if inputs.source_rows.is_empty() {
            b.missing_source = true;
        } else {
            let rows = g.select_rows(need(vars.p_src_id, "p_src_id")?, &inputs.source_rows)?;
            let t = reid_source_loss(g, rows, &inputs.source_labels)?;
            b.reid_source = g.value(t).item();
            terms.push(t);
        }
    }
    if cfg.reid_target && !inputs.target_rows.is_empty() {
        let rows = g.select_rows(need(vars.p_tgt_id, "p_tgt_id")?, &inputs.target_rows)?;
        let ones;
        let weights = if cfg.confidence_weights {
            &inputs.target_weights
        } else {
            ones = vec![1.0; inputs.target_rows.len()];
            &ones
        };
        let t = reid_target_loss(g, rows, &inputs.target_labels, weights)?;
        b.reid_target = g.value(t).item();
        terms.push(t);
    }
    if cfg.domain_specific {
        b.single_domain = inputs.source_rows.is_empty() || inputs.target_rows.is_empty();
        let t = domain_specific_loss(g, need(vars.p_domain, "p_domain")?, &inputs.domains)?;
        b.domain_specific = g.value(t).item();
        terms.push(t);
    }
    if cfg.orthogonality {
        let t = orthogonality_loss(g, vars.f_sh, need(vars.f_sp, "f_sp")?, cfg.orth_cosine)?;
        b.orthogonality = g.value(t).item();
        terms.push(t);
    }

    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = g.add(total, t)?;
    }
    b.total = g.value(total).item();
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = build(&mut g).unwrap();
        g.value(v).item()
    }

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn domain_similarity_values() {
        let ln2 = std::f64::consts::LN_2;
        let near_one = eval(|g| {
            let p = g.constant(Tensor::full(&[4], 1.0 - PROB_EPS));
            domain_similarity_loss(g, p)
        });
        assert!(near_one.abs() < 1e-11);
        let half = eval(|g| {
            let p = g.constant(Tensor::full(&[3], 0.5));
            domain_similarity_loss(g, p)
        });
        assert!((half - ln2).abs() < 1e-12);
        let mixed = eval(|g| {
            let p = g.constant(Tensor::from_vec(vec![0.5, 0.25]));
            domain_similarity_loss(g, p)
        });
        assert!((mixed - 1.5 * ln2).abs() < 1e-12);
    }

    #[test]
    fn reid_source_values() {
        let uniform = eval(|g| {
            let p = g.constant(Tensor::full(&[2, 10], 0.1));
            reid_source_loss(g, p, &[3, 7])
        });
        assert!((uniform - 10f64.ln()).abs() < 1e-12);
        let onehot = eval(|g| {
            let p = g.constant(probs(&[vec![0.0, 1.0, 0.0]]));
            reid_source_loss(g, p, &[1])
        });
        assert!(onehot.abs() < 1e-11);
        let v = eval(|g| {
            let p = g.constant(probs(&[vec![0.7, 0.2, 0.1]]));
            reid_source_loss(g, p, &[0])
        });
        assert!((v + 0.7f64.ln()).abs() < 1e-12);
        let mut g = Graph::new();
        let p = g.constant(probs(&[vec![0.7, 0.2, 0.1]]));
        assert!(reid_source_loss(&mut g, p, &[3]).is_err());
    }

    #[test]
    fn reid_target_values() {
        let zero = eval(|g| {
            let p = g.constant(probs(&[vec![0.3, 0.7], vec![0.9, 0.1]]));
            reid_target_loss(g, p, &[0, 1], &[0.0, 0.0])
        });
        assert_eq!(zero, 0.0);
        let single = eval(|g| {
            let p = g.constant(probs(&[vec![0.5, 0.5]]));
            reid_target_loss(g, p, &[1], &[0.5])
        });
        assert!((single - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let rows = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.3, 0.1]];
        let weighted = eval(|g| {
            let p = g.constant(probs(&rows));
            reid_target_loss(g, p, &[2, 0], &[1.0, 1.0])
        });
        let plain = eval(|g| {
            let p = g.constant(probs(&rows));
            reid_source_loss(g, p, &[2, 0])
        });
        assert_eq!(weighted, plain);
    }

    #[test]
    fn domain_specific_values() {
        use Domain::*;
        let perfect = eval(|g| {
            let p = g.constant(probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
            domain_specific_loss(g, p, &[Source, Target])
        });
        assert!(perfect.abs() < 1e-11);
        let uniform = eval(|g| {
            let p = g.constant(Tensor::full(&[3, 2], 0.5));
            domain_specific_loss(g, p, &[Source, Target, Target])
        });
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-12);
        let mixed = eval(|g| {
            let p = g.constant(probs(&[vec![0.9, 0.1], vec![0.2, 0.8]]));
            domain_specific_loss(g, p, &[Source, Target])
        });
        assert!((mixed - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_values() {
        let orth = |a: Vec<f64>, b: Vec<f64>, cosine: bool| {
            eval(|g| {
                let x = g.constant(Tensor::from_rows(&[a]).unwrap());
                let y = g.constant(Tensor::from_rows(&[b]).unwrap());
                orthogonality_loss(g, x, y, cosine)
            })
        };
        assert_eq!(orth(vec![1.0, 0.0], vec![0.0, 3.0], false), 0.0);
        assert!((orth(vec![0.6, 0.8], vec![0.6, 0.8], false) - 1.0).abs() < 1e-12);
        assert!((orth(vec![2.0, 0.0], vec![2.0, 0.0], false) - 0.25).abs() < 1e-12);
        assert!((orth(vec![2.0, 0.0], vec![2.0, 0.0], true) - 1.0).abs() < 1e-12);
        // Doubling both vectors divides the squared-norm form by 4.
        let base = orth(vec![0.3, 1.1, 0.2], vec![0.5, 0.4, 0.9], false);
        let doubled = orth(vec![0.6, 2.2, 0.4], vec![1.0, 0.8, 1.8], false);
        assert!((doubled - base / 4.0).abs() < 1e-12);
        // All-zero vectors are clamped rather than dividing by zero.
        assert_eq!(orth(vec![0.0, 0.0], vec![0.0, 0.0], false), 0.0);
    }
}
