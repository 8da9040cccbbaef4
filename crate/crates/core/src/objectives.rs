//! Sampled-softmax recommendation loss, InfoNCE, and the multi-level
//! contrastive objective, all recorded on a [`Tape`].

use crate::error::{dim_err, Error, Result};
use crate::numerics::{DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Recommendation softmax temperature.
    pub tau1: f64,
    /// Contrastive temperature.
    pub tau2: f64,
    /// Weight of the contrastive loss.
    pub lambda: f64,
    pub n_negatives: usize,
    /// Average both InfoNCE directions instead of anchoring on view 1.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 1.0,
            tau2: 0.2,
            lambda: 50.0,
            n_negatives: 10,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) || !self.tau1.is_finite() {
            return Err(Error::Usage(format!(
                "loss.tau1 must be positive, got {}",
                self.tau1
            )));
        }
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return Err(Error::Usage(format!(
                "loss.tau2 must be positive, got {}",
                self.tau2
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Usage(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Which of the four contrastive terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClTerms {
    pub seq_fused: bool,
    pub item_fused: bool,
    pub seq_intent: bool,
    pub item_intent: bool,
}

impl ClTerms {
    pub const ALL: ClTerms = ClTerms {
        seq_fused: true,
        item_fused: true,
        seq_intent: true,
        item_intent: true,
    };
    pub const NONE: ClTerms = ClTerms {
        seq_fused: false,
        item_fused: false,
        seq_intent: false,
        item_intent: false,
    };

    pub fn any(&self) -> bool {
        self.seq_fused || self.item_fused || self.seq_intent || self.item_intent
    }
}

/// One view's representations of the batch's sequences and items.
#[derive(Clone, Copy, Debug)]
pub struct ViewReps {
    pub item_fused: Var,
    pub item_intent: Option<Var>,
    pub seq_fused: Var,
    pub seq_intent: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ViewBundle {
    pub first: ViewReps,
    pub second: ViewReps,
}

/// Mean over the batch of `−log softmax(s_b / τ)` at the positive, where
/// row `b` of `h` is scored against `candidates` rows `b·C .. (b+1)·C`.
pub fn rec_loss(
    tape: &mut Tape,
    h: Var,
    candidates: Var,
    positives: &[usize],
    tau1: f64,
) -> Result<Var> {
    let b = tape.value(h)?.rows();
    let rows = tape.value(candidates)?.rows();
    if b == 0 || rows % b != 0 {
        return Err(dim_err(
            "rec_loss",
            format!("{rows} candidate rows for batch {b}"),
        ));
    }
    let scores = tape.group_dot(h, candidates, rows / b)?;
    tape.cross_entropy(scores, positives, 1.0 / tau1)
}

/// One-directional InfoNCE with cosine similarity: row `i` of `a1` is the
/// anchor, row `i` of `a2` its positive, all other rows of `a2` negatives.
pub fn infonce(tape: &mut Tape, a1: Var, a2: Var, tau2: f64) -> Result<Var> {
    let (s1, s2) = (tape.value(a1)?.shape(), tape.value(a2)?.shape());
    if s1 != s2 {
        return Err(dim_err("infonce", format!("{s1:?} vs {s2:?}")));
    }
    let n1 = tape.l2_normalize_rows(a1)?;
    let n2 = tape.l2_normalize_rows(a2)?;
    let sims = tape.matmul_nt(n1, n2)?;
    let targets: Vec<usize> = (0..s1[0]).collect();
    tape.cross_entropy(sims, &targets, 1.0 / tau2)
}

/// Average of both anchoring directions.
pub fn infonce_symmetric(tape: &mut Tape, a1: Var, a2: Var, tau2: f64) -> Result<Var> {
    let forward = infonce(tape, a1, a2, tau2)?;
    let backward = infonce(tape, a2, a1, tau2)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, 0.5)
}

fn pair_loss(tape: &mut Tape, a: Var, b: Var, tau2: f64, symmetric: bool) -> Result<Var> {
    if symmetric {
        infonce_symmetric(tape, a, b, tau2)
    } else {
        infonce(tape, a, b, tau2)
    }
}

/// Sum of the enabled InfoNCE terms. Intent terms whose representations are
/// absent are skipped.
pub fn multilevel_cl(
    tape: &mut Tape,
    bundle: &ViewBundle,
    terms: ClTerms,
    tau2: f64,
    symmetric: bool,
) -> Result<Var> {
    let (v1, v2) = (&bundle.first, &bundle.second);
    let mut pairs = Vec::new();
    if terms.seq_fused {
        pairs.push((v1.seq_fused, v2.seq_fused));
    }
    if terms.item_fused {
        pairs.push((v1.item_fused, v2.item_fused));
    }
    if terms.seq_intent {
        if let (Some(a), Some(b)) = (v1.seq_intent, v2.seq_intent) {
            pairs.push((a, b));
        }
    }
    if terms.item_intent {
        if let (Some(a), Some(b)) = (v1.item_intent, v2.item_intent) {
            pairs.push((a, b));
        }
    }
    let mut total: Option<Var> = None;
    for (a, b) in pairs {
        let l = pair_loss(tape, a, b, tau2, symmetric)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap_or_else(|| tape.leaf(DenseTensor::scalar(0.0))))
}

/// `rec + λ · cl`
pub fn total_loss(tape: &mut Tape, rec: Var, cl: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(cl, lambda)?;
    tape.add(rec, weighted)
}

/// Value-level InfoNCE for plain tensors.
pub fn infonce_value(a1: &DenseTensor, a2: &DenseTensor, tau2: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.leaf(a1.clone()), tape.leaf(a2.clone()));
    let l = infonce(&mut tape, x, y, tau2)?;
    tape.value(l)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn rec_value(h: &DenseTensor, cands: &DenseTensor, pos: &[usize], tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (hv, cv) = (tape.leaf(h.clone()), tape.leaf(cands.clone()));
        let l = rec_loss(&mut tape, hv, cv, pos, tau)?;
        tape.value(l)?.item()
    }

    #[test]
    fn rec_loss_trivial_cases() {
        let h = DenseTensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let single = DenseTensor::from_rows(&[vec![0.3, -0.1]]).unwrap();
        assert_eq!(rec_value(&h, &single, &[0], 1.0).unwrap(), 0.0);
        let tie = DenseTensor::from_rows(&[vec![0.3, -0.1], vec![0.3, -0.1]]).unwrap();
        assert!((rec_value(&h, &tie, &[0], 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            rec_value(&h, &tie, &[2], 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rec_loss_matches_logsumexp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, c, d, tau) = (3, 4, 5, 0.7);
        let h = random(b, d, &mut rng);
        let cands = random(b * c, d, &mut rng);
        let pos = [2, 0, 3];
        let mut oracle = 0.0;
        for i in 0..b {
            let s: Vec<f64> = (0..c)
                .map(|j| dot(h.row(i), cands.row(i * c + j)) / tau)
                .collect();
            let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - s[pos[i]];
        }
        oracle /= b as f64;
        assert!((rec_value(&h, &cands, &pos, tau).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn infonce_trivial_cases() {
        let one = DenseTensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
        assert_eq!(infonce_value(&one, &one, 0.2).unwrap(), 0.0);
        for b in [2usize, 8, 32] {
            let same = DenseTensor::new(b, 3, vec![0.5; b * 3]).unwrap();
            assert!((infonce_value(&same, &same, 0.2).unwrap() - (b as f64).ln()).abs() <= 1e-6);
        }
        let zeros = DenseTensor::zeros(4, 3);
        assert!((infonce_value(&zeros, &zeros, 0.2).unwrap() - 4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn infonce_is_scale_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(6, 4, &mut rng);
        let b = random(6, 4, &mut rng);
        let l = infonce_value(&a, &b, 0.2).unwrap();
        assert!(l >= 0.0);
        let l2 = infonce_value(&crate::numerics::scale(&a, 3.0), &b, 0.2).unwrap();
        assert!((l - l2).abs() < 1e-12);
    }

    fn bundle(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
    ) -> (ViewBundle, [(DenseTensor, DenseTensor); 4]) {
        let pairs = [
            (random(4, 3, rng), random(4, 3, rng)),
            (random(5, 3, rng), random(5, 3, rng)),
            (random(4, 3, rng), random(4, 3, rng)),
            (random(5, 3, rng), random(5, 3, rng)),
        ];
        let mut leaf = |t: &DenseTensor| tape.leaf(t.clone());
        let first = ViewReps {
            seq_fused: leaf(&pairs[0].0),
            item_fused: leaf(&pairs[1].0),
            seq_intent: Some(leaf(&pairs[2].0)),
            item_intent: Some(leaf(&pairs[3].0)),
        };
        let second = ViewReps {
            seq_fused: leaf(&pairs[0].1),
            item_fused: leaf(&pairs[1].1),
            seq_intent: Some(leaf(&pairs[2].1)),
            item_intent: Some(leaf(&pairs[3].1)),
        };
        (ViewBundle { first, second }, pairs)
    }

    #[test]
    fn multilevel_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let (b, pairs) = bundle(&mut tape, &mut rng);
        let parts: Vec<f64> = pairs
            .iter()
            .map(|(x, y)| infonce_value(x, y, 0.2).unwrap())
            .collect();
        let all = multilevel_cl(&mut tape, &b, ClTerms::ALL, 0.2, false).unwrap();
        let all = tape.value(all).unwrap().item().unwrap();
        assert!((all - parts.iter().sum::<f64>()).abs() <= 1e-12);

        let fused_only = ClTerms {
            seq_intent: false,
            item_intent: false,
            ..ClTerms::ALL
        };
        let v = multilevel_cl(&mut tape, &b, fused_only, 0.2, false).unwrap();
        assert!((tape.value(v).unwrap().item().unwrap() - parts[0] - parts[1]).abs() <= 1e-12);
        let intent_only = ClTerms {
            seq_fused: false,
            item_fused: false,
            ..ClTerms::ALL
        };
        let v = multilevel_cl(&mut tape, &b, intent_only, 0.2, false).unwrap();
        assert!((tape.value(v).unwrap().item().unwrap() - parts[2] - parts[3]).abs() <= 1e-12);
        let none = multilevel_cl(&mut tape, &b, ClTerms::NONE, 0.2, false).unwrap();
        assert_eq!(tape.value(none).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn symmetric_averages_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(5, 3, &mut rng);
        let b = random(5, 3, &mut rng);
        let mut tape = Tape::new();
        let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let s = infonce_symmetric(&mut tape, x, y, 0.2).unwrap();
        let expect =
            0.5 * (infonce_value(&a, &b, 0.2).unwrap() + infonce_value(&b, &a, 0.2).unwrap());
        assert!((tape.value(s).unwrap().item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let mut tape = Tape::new();
        let rec = tape.leaf(DenseTensor::scalar(1.0));
        let cl = tape.leaf(DenseTensor::scalar(2.0));
        let t = total_loss(&mut tape, rec, cl, 50.0).unwrap();
        assert_eq!(tape.value(t).unwrap().item().unwrap(), 101.0);
        let z = total_loss(&mut tape, rec, cl, 0.0).unwrap();
        assert_eq!(tape.value(z).unwrap().item().unwrap(), 1.0);
        let vals: Vec<f64> = [0.5, 1.5, 2.5]
            .iter()
            .map(|&l| {
                let t = total_loss(&mut tape, rec, cl, l).unwrap();
                tape.value(t).unwrap().item().unwrap()
            })
            .collect();
        assert!(((vals[1] - vals[0]) - (vals[2] - vals[1])).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            tau1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            tau2: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            lambda: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
