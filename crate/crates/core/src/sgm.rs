//! Self-guided module: per-category prototype abstraction, randomized
//! teacher–student pairing across modalities, and the KL self-guidance
//! loss. Training-only; the forward path of the model never depends on it.
//!
//! Prototypes are per-category means of stage features under the label map
//! downsampled to stage resolution. At every training step the present
//! modalities are partitioned into teacher/student pairs (uniformly at
//! random by default; greedy cosine matching as an ablation). For each
//! stage, pair, and category present at that stage's resolution, the
//! prototype rows are softmax-normalized over the channel axis and compared
//! with KL divergence, teacher detached.

use rand_chacha::ChaCha8Rng;

use crate::cmtb::StageFeatures;
use crate::error::{Error, Result};
use crate::params::ForwardPass;
use crate::tape::TensorId;
use crate::tensor::{Labels, Real};
use crate::util::shuffled_indices;

/// Probability floor applied after softmax so KL never sees a zero.
pub const KL_FLOOR: f64 = 1e-8;

/// Which axis the prototype KL runs over. `Channel` compares one
/// distribution per present category (the default reading); `Category`
/// compares a single distribution over present categories per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlAxis {
    #[default]
    Channel,
    Category,
}

/// Teacher/student partition of modality indices. `pairs ∪ dropped` covers
/// the drawn modalities exactly once; one modality is dropped iff the count
/// is odd.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
    pub dropped: Option<usize>,
}

impl Pairing {
    fn from_order(order: &[usize]) -> Self {
        let dropped = (order.len() % 2 == 1).then(|| order[order.len() - 1]);
        let pairs = order[..order.len() - order.len() % 2]
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect();
        Pairing { pairs, dropped }
    }

    pub fn covered(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|&(t, s)| [t, s])
            .chain(self.dropped)
            .collect();
        all.sort_unstable();
        all
    }
}

/// Uniformly random teacher/student partition of modalities `0..n`.
pub fn assign_pairs(n: usize, rng: &mut ChaCha8Rng) -> Result<Pairing> {
    let indices: Vec<usize> = (0..n).collect();
    assign_pairs_over(&indices, rng)
}

/// Same partition over an explicit (e.g. present-only) index set.
pub fn assign_pairs_over(indices: &[usize], rng: &mut ChaCha8Rng) -> Result<Pairing> {
    if indices.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairing needs ≥ 2 modalities, got {}",
            indices.len()
        )));
    }
    let order: Vec<usize> = shuffled_indices(rng, indices.len())
        .into_iter()
        .map(|i| indices[i])
        .collect();
    Ok(Pairing::from_order(&order))
}

/// Nearest-neighbour (top-left representative) label downsampling; the
/// ignore id passes through untouched.
pub fn downsample_labels(labels: &Labels, target_hw: (usize, usize)) -> Result<Labels> {
    let (h, w) = (labels.shape[0], labels.shape[1]);
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::InvalidArgument(format!(
            "target {th}×{tw} does not divide {h}×{w}"
        )));
    }
    let (fy, fx) = (h / th, w / tw);
    let mut data = Vec::with_capacity(th * tw);
    for i in 0..th {
        for j in 0..tw {
            data.push(labels.data[i * fy * w + j * fx]);
        }
    }
    Labels::new(vec![th, tw], data)
}

/// Per-category feature means at one stage (Eq.-style prototyping): rows
/// for categories with no pixels are masked via the presence vector.
pub fn compute_prototypes<F: Real>(
    fp: &mut ForwardPass<F>,
    features: TensorId,
    labels: &[i32],
    classes: usize,
) -> Result<(TensorId, Vec<bool>)> {
    fp.tape.class_mean(features, labels, classes)
}

/// Prototypes for every present modality at every stage, plus the per-stage
/// category presence masks (labels are shared across modalities, so the
/// mask is too).
pub struct PrototypeSet {
    /// protos[modality][stage], `None` for absent modalities.
    pub protos: Vec<Vec<Option<TensorId>>>,
    /// present[stage][category].
    pub present: Vec<Vec<bool>>,
}

pub fn build_prototypes<F: Real>(
    fp: &mut ForwardPass<F>,
    feats: &StageFeatures,
    labels: &Labels,
    classes: usize,
    ignore_id: i32,
) -> Result<PrototypeSet> {
    let stages = feats.features.len();
    let modalities = feats.present.len();
    let mut protos = vec![vec![None; stages]; modalities];
    let mut present = Vec::with_capacity(stages);
    for si in 0..stages {
        let lab = downsample_labels(labels, feats.hw[si])?;
        let masked: Vec<i32> = lab
            .data
            .iter()
            .map(|&v| if v == ignore_id { -1 } else { v })
            .collect();
        let mut stage_present: Option<Vec<bool>> = None;
        for (m, row) in protos.iter_mut().enumerate() {
            let Some(f) = feats.features[si][m] else { continue };
            let (p, mask) = compute_prototypes(fp, f, &masked, classes)?;
            row[si] = Some(p);
            stage_present.get_or_insert(mask);
        }
        present.push(stage_present.unwrap_or_else(|| vec![false; classes]));
    }
    Ok(PrototypeSet { protos, present })
}

/// Softmax over the flattened input with an ε floor, renormalized so the
/// entries still sum to one.
pub fn softmax_floor<F: Real>(fp: &mut ForwardPass<F>, x: TensorId) -> Result<TensorId> {
    let n = fp.tape.value(x).len();
    let flat = fp.tape.reshape(x, vec![n])?;
    let p = fp.tape.softmax(flat, 0)?;
    let eps = KL_FLOOR;
    let shifted = fp.tape.add_scalar(p, F::from_f64(eps))?;
    fp.tape.scale(shifted, F::from_f64(1.0 / (1.0 + n as f64 * eps)))
}

/// The self-guidance loss: over stages and teacher/student pairs, KL
/// between normalized prototype rows, averaged over the categories present
/// at that stage. Returns the scalar loss node and a flag set when no
/// category was present at any stage (loss is zero in that case).
pub fn sgm_loss<F: Real>(
    fp: &mut ForwardPass<F>,
    protos: &PrototypeSet,
    pairing: &Pairing,
    axis: KlAxis,
) -> Result<(TensorId, bool)> {
    let stages = protos.present.len();
    let mut total: Option<TensorId> = None;
    let mut any_category = false;

    for si in 0..stages {
        let cats: Vec<usize> = protos.present[si]
            .iter()
            .enumerate()
            .filter_map(|(c, &p)| p.then_some(c))
            .collect();
        if cats.is_empty() {
            continue;
        }
        any_category = true;
        for &(t, s) in &pairing.pairs {
            let tp = protos.protos[t][si].ok_or_else(|| {
                Error::InvalidArgument(format!("pairing references absent modality {t}"))
            })?;
            let sp = protos.protos[s][si].ok_or_else(|| {
                Error::InvalidArgument(format!("pairing references absent modality {s}"))
            })?;
            let term = match axis {
                KlAxis::Channel => {
                    let mut acc: Option<TensorId> = None;
                    for &c in &cats {
                        let t_row = fp.tape.narrow(tp, 0, c, 1)?;
                        let s_row = fp.tape.narrow(sp, 0, c, 1)?;
                        let t_dist = softmax_floor(fp, t_row)?;
                        let s_dist = softmax_floor(fp, s_row)?;
                        let kl = fp.tape.kl_div(t_dist, s_dist)?;
                        acc = Some(match acc {
                            Some(prev) => fp.tape.add(prev, kl)?,
                            None => kl,
                        });
                    }
                    let sum = acc.expect("cats non-empty");
                    fp.tape.scale(sum, F::from_f64(1.0 / cats.len() as f64))?
                }
                KlAxis::Category => {
                    let t_vec = category_profile(fp, tp, &cats)?;
                    let s_vec = category_profile(fp, sp, &cats)?;
                    let t_dist = softmax_floor(fp, t_vec)?;
                    let s_dist = softmax_floor(fp, s_vec)?;
                    fp.tape.kl_div(t_dist, s_dist)?
                }
            };
            total = Some(match total {
                Some(prev) => fp.tape.add(prev, term)?,
                None => term,
            });
        }
    }

    match total {
        Some(t) => Ok((t, false)),
        None => Ok((fp.tape.constant_scalar(F::zero())?, !any_category)),
    }
}

/// Mean over channels of the present prototype rows → one value per
/// present category.
fn category_profile<F: Real>(fp: &mut ForwardPass<F>, protos: TensorId, cats: &[usize]) -> Result<TensorId> {
    let d = fp.tape.shape(protos)[1];
    let rows: Vec<TensorId> = cats
        .iter()
        .map(|&c| fp.tape.narrow(protos, 0, c, 1))
        .collect::<Result<_>>()?;
    let gathered = if rows.len() == 1 {
        rows[0]
    } else {
        fp.tape.concat(&rows, 0)?
    };
    let ones = fp.tape.leaf_values(vec![d, 1], vec![F::from_f64(1.0 / d as f64); d], false)?;
    let means = fp.tape.matmul(gathered, ones)?;
    fp.tape.reshape(means, vec![cats.len()])
}

/// Greedy most-similar pairing by cosine of per-modality prototype means at
/// the deepest stage with any present category (ablation switch). Roles
/// within a pair are drawn from the generator, as in the random scheme.
pub fn assign_pairs_cosine<F: Real>(
    fp: &ForwardPass<F>,
    protos: &PrototypeSet,
    present_modalities: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Pairing> {
    if present_modalities.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairing needs ≥ 2 modalities, got {}",
            present_modalities.len()
        )));
    }
    let stages = protos.present.len();
    let stage = (0..stages)
        .rev()
        .find(|&si| protos.present[si].iter().any(|&p| p));
    let Some(si) = stage else {
        // No category anywhere; fall back to the random scheme.
        return assign_pairs_over(present_modalities, rng);
    };
    let cats: Vec<usize> = protos.present[si]
        .iter()
        .enumerate()
        .filter_map(|(c, &p)| p.then_some(c))
        .collect();

    // Mean prototype vector per modality, read out as plain values.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(present_modalities.len());
    for &m in present_modalities {
        let pid = protos.protos[m][si].ok_or_else(|| {
            Error::InvalidArgument(format!("modality {m} lacks prototypes at stage {si}"))
        })?;
        let d = fp.tape.shape(pid)[1];
        let vals = fp.tape.value(pid);
        let mut mean = vec![0.0f64; d];
        for &c in &cats {
            for j in 0..d {
                mean[j] += vals[c * d + j].as_f64();
            }
        }
        for v in &mut mean {
            *v /= cats.len() as f64;
        }
        means.push(mean);
    }

    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let k = present_modalities.len();
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            candidates.push((i, j, cosine(&means[i], &means[j])));
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });

    use rand::Rng;
    let mut used = vec![false; k];
    let mut pairs = Vec::new();
    for (i, j, _) in candidates {
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        let (a, b) = (present_modalities[i], present_modalities[j]);
        if rng.random_range(0..2) == 0 {
            pairs.push((a, b));
        } else {
            pairs.push((b, a));
        }
    }
    let dropped = used
        .iter()
        .position(|&u| !u)
        .map(|i| present_modalities[i]);
    Ok(Pairing { pairs, dropped })
}
