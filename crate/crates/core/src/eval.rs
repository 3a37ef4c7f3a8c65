//! Quantitative protocols: filter-ablation curves, IoU-AUC explanation
//! accuracy against ground-truth masks, heatmap-guided occlusion,
//! class-sensitivity sanity checks, and label-reconstruction ROC-AUC.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::deconv::{upsample_activation, BackwardPolicy, DeconvError, Heatmap, HeatmapMode};
use crate::descriptor::{extract_descriptor, DatasetMatrices, DescriptorError, DescriptorLayout};
use crate::explain::{explain_image_with, ExplainError};
use crate::flowergen::{load_mask, FlowerError};
use crate::network::{accuracy, FeatureId, LayerKind, ModelError, Network};
use crate::selector::RelevanceMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Deconv(#[from] DeconvError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Flower(#[from] FlowerError),
    #[error("ablation schedule must be non-decreasing")]
    BadSchedule,
    #[error("ablation count {n} exceeds feature pool of {pool}")]
    ScheduleExceedsPool { n: usize, pool: usize },
    #[error("occlusion patch side {patch} exceeds image side {side}")]
    PatchTooLarge { patch: usize, side: usize },
    #[error("sample {index} has no mask")]
    MissingMask { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone)]
pub struct AblationCurve {
    pub condition: String,
    pub schedule: Vec<usize>,
    /// Mean classification accuracy after zeroing the first n features.
    pub accuracy: Vec<f64>,
}

/// Zeroes prefixes of `features` (in the given relevance order) and
/// records test accuracy at each count of the schedule.
pub fn ablation_curve(
    net: &Network,
    features: &[FeatureId],
    dataset: &LabeledDataset,
    schedule: &[usize],
    condition: &str,
) -> Result<AblationCurve, EvalError> {
    if schedule.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::BadSchedule);
    }
    let mut acc = Vec::with_capacity(schedule.len());
    for &n in schedule {
        if n > features.len() {
            return Err(EvalError::ScheduleExceedsPool { n, pool: features.len() });
        }
        let ablated = net.zero_filters(&features[..n])?;
        acc.push(accuracy(&ablated, dataset)?);
    }
    Ok(AblationCurve { condition: condition.to_string(), schedule: schedule.to_vec(), accuracy: acc })
}

/// Random-condition baseline: draws each count uniformly from the pool,
/// averaged over the given seeds.
pub fn random_ablation_curve(
    net: &Network,
    pool: &[FeatureId],
    dataset: &LabeledDataset,
    schedule: &[usize],
    seeds: &[u64],
) -> Result<AblationCurve, EvalError> {
    if schedule.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::BadSchedule);
    }
    let mut acc = vec![0.0f64; schedule.len()];
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(&mut rng);
        let curve = ablation_curve(net, &shuffled, dataset, schedule, "Random")?;
        for (a, v) in acc.iter_mut().zip(&curve.accuracy) {
            *a += v / seeds.len() as f64;
        }
    }
    Ok(AblationCurve { condition: "Random".into(), schedule: schedule.to_vec(), accuracy: acc })
}

// --------------------------------------------------------------------- IoU

/// Intersection over union of two binary sets; empty-vs-empty is 0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Trapezoidal area under (x, y) normalized to the x-range, in percent.
pub fn curve_auc_percent(xs: &[f64], ys: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 1..xs.len() {
        area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    100.0 * area / (xs[xs.len() - 1] - xs[0])
}

#[derive(Debug, Clone)]
pub struct IoUResult {
    pub fold: usize,
    pub thresholds: Vec<f64>,
    pub mean_iou: Vec<f64>,
    pub auc_percent: f64,
    /// Samples skipped for empty masks or empty explanations.
    pub excluded: usize,
}

/// Per-threshold mean IoU and its AUC for a batch of (heatmap, mask) pairs.
pub fn iou_curve(pairs: &[(&Heatmap, &[bool])], thresholds: &[f64], fold: usize) -> IoUResult {
    let mut sums = vec![0.0f64; thresholds.len()];
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (h, mask) in pairs {
        if !mask.iter().any(|&b| b) {
            excluded += 1;
            continue;
        }
        used += 1;
        for (s, &tau) in sums.iter_mut().zip(thresholds) {
            let bin: Vec<bool> = h.values.iter().map(|&v| v as f64 >= tau).collect();
            *s += iou(&bin, mask);
        }
    }
    let mean_iou: Vec<f64> = if used == 0 {
        vec![0.0; thresholds.len()]
    } else {
        sums.iter().map(|&s| s / used as f64).collect()
    };
    let auc_percent = curve_auc_percent(thresholds, &mean_iou);
    IoUResult { fold, thresholds: thresholds.to_vec(), mean_iou, auc_percent, excluded }
}

/// One heatmap summarizing the image's explanation: pixelwise max over the
/// top-k responding features, rendered in the requested mode. `None` when
/// the class column has no usable feature.
pub fn explanation_heatmap(
    net: &Network,
    w: &RelevanceMatrix,
    image: &Tensor,
    mode: HeatmapMode,
    k: usize,
    force_class: Option<usize>,
) -> Result<Option<Heatmap>, EvalError> {
    match mode {
        HeatmapMode::Ours | HeatmapMode::DeconvGbVanilla => {
            let policy = if mode == HeatmapMode::Ours {
                BackwardPolicy::ours()
            } else {
                BackwardPolicy::vanilla()
            };
            let expl = explain_image_with(net, w, image, k, force_class, policy)?;
            let maps: Vec<Heatmap> = expl.ranked.into_iter().map(|r| r.heatmap).collect();
            Ok(Heatmap::combine_max(&maps))
        }
        HeatmapMode::UpsampledActivation => {
            // rank as usual but keep only conv features, where the baseline
            // is defined
            let layout = DescriptorLayout::for_network(net);
            let trace = net.forward(image, true)?;
            let class = force_class.unwrap_or(trace.predicted);
            let desc = extract_descriptor(&trace, net).map_err(EvalError::Descriptor)?;
            let mut scored: Vec<(FeatureId, f64)> = Vec::new();
            for &(i, weight) in w.column(class) {
                let f = layout.feature_of_index(i).map_err(EvalError::Descriptor)?;
                if matches!(net.layers[f.layer].kind, LayerKind::Conv(_)) {
                    scored.push((f, weight * desc.values[i]));
                }
            }
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| (a.0.layer, a.0.filter).cmp(&(b.0.layer, b.0.filter)))
            });
            scored.truncate(k);
            let mut maps = Vec::with_capacity(scored.len());
            for (f, _) in scored {
                maps.push(upsample_activation(net, &trace, f)?);
            }
            Ok(Heatmap::combine_max(&maps))
        }
    }
}

/// Per-fold IoU-AUC of the chosen heatmap mode over a mask-annotated
/// dataset.
pub fn iou_auc_study(
    net: &Network,
    w: &RelevanceMatrix,
    dataset: &LabeledDataset,
    mode: HeatmapMode,
    thresholds: &[f64],
    k: usize,
) -> Result<Vec<IoUResult>, EvalError> {
    let folds = dataset.fold_count().max(1);
    let mut results = Vec::with_capacity(folds);
    for fold in 0..folds {
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        let mut excluded = 0usize;
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.fold.unwrap_or(0) != fold {
                continue;
            }
            let path = s.mask_path.as_ref().ok_or(EvalError::MissingMask { index: i })?;
            let mask = load_mask(path)?;
            match explanation_heatmap(net, w, &s.image, mode, k, None)? {
                Some(h) => {
                    maps.push(h);
                    masks.push(mask);
                }
                None => excluded += 1,
            }
        }
        let pairs: Vec<(&Heatmap, &[bool])> =
            maps.iter().zip(masks.iter().map(|m| m.as_slice())).collect();
        let mut r = iou_curve(&pairs, thresholds, fold);
        r.excluded += excluded;
        results.push(r);
    }
    Ok(results)
}

// --------------------------------------------------------------- occlusion

#[derive(Debug, Clone)]
pub struct OcclusionResult {
    pub base_confidence: f64,
    /// Predicted-class confidence after each placed patch.
    pub confidences: Vec<f64>,
    /// Fraction of pixels occluded after each patch.
    pub coverage: Vec<f64>,
    pub patches: Vec<(usize, usize)>,
}

const OCCLUSION_FILL: f32 = 0.5;

fn integral(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            s[(y + 1) * (w + 1) + x + 1] =
                values[y * w + x] + s[y * (w + 1) + x + 1] + s[(y + 1) * (w + 1) + x] - s[y * (w + 1) + x];
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y0: usize, x0: usize, side: usize) -> f64 {
    let (y1, x1) = (y0 + side, x0 + side);
    s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0]
}

/// Greedy deterministic occlusion: repeatedly cover the non-overlapping
/// patch holding the most remaining heatmap mass (ties to the topmost,
/// leftmost position), fill with mid-gray, and record the confidence of
/// the originally predicted class, until 30% of the image is covered.
pub fn occlusion_study(
    net: &Network,
    heatmap: &Heatmap,
    image: &Tensor,
    patch_side: usize,
    max_coverage: f64,
) -> Result<OcclusionResult, EvalError> {
    let side = image.height();
    if patch_side > side {
        return Err(EvalError::PatchTooLarge { patch: patch_side, side });
    }
    let base_trace = net.forward(image, false)?;
    let target = base_trace.predicted;
    let base_confidence = base_trace.probs[target] as f64;

    let mass: Vec<f64> = heatmap.values.iter().map(|&v| v as f64).collect();
    let mass_int = integral(&mass, side, side);
    let mut occupied = vec![0.0f64; side * side];
    let mut occluded = image.clone();
    let mut confidences = Vec::new();
    let mut coverage = Vec::new();
    let mut patches = Vec::new();
    let total = (side * side) as f64;

    loop {
        let covered: f64 = occupied.iter().sum();
        if covered / total >= max_coverage {
            break;
        }
        let occ_int = integral(&occupied, side, side);
        let mut best: Option<(f64, usize, usize)> = None;
        for y in 0..=side - patch_side {
            for x in 0..=side - patch_side {
                if box_sum(&occ_int, side, y, x, patch_side) > 0.0 {
                    continue;
                }
                let m = box_sum(&mass_int, side, y, x, patch_side);
                if best.map(|(bm, _, _)| m > bm).unwrap_or(true) {
                    best = Some((m, y, x));
                }
            }
        }
        let Some((_, y, x)) = best else { break };
        for dy in 0..patch_side {
            for dx in 0..patch_side {
                occupied[(y + dy) * side + x + dx] = 1.0;
                for ch in 0..image.channels() {
                    occluded.set(0, ch, y + dy, x + dx, OCCLUSION_FILL);
                }
            }
        }
        let trace = net.forward(&occluded, false)?;
        confidences.push(trace.probs[target] as f64);
        coverage.push(occupied.iter().sum::<f64>() / total);
        patches.push((y, x));
    }
    Ok(OcclusionResult { base_confidence, confidences, coverage, patches })
}

/// Seeded uniform-random non-overlapping placement baseline.
pub fn occlusion_random(
    net: &Network,
    image: &Tensor,
    patch_side: usize,
    max_coverage: f64,
    seed: u64,
) -> Result<OcclusionResult, EvalError> {
    let side = image.height();
    if patch_side > side {
        return Err(EvalError::PatchTooLarge { patch: patch_side, side });
    }
    let base_trace = net.forward(image, false)?;
    let target = base_trace.predicted;
    let base_confidence = base_trace.probs[target] as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occupied = vec![false; side * side];
    let mut occluded = image.clone();
    let mut confidences = Vec::new();
    let mut coverage = Vec::new();
    let mut patches = Vec::new();
    let total = (side * side) as f64;
    let mut covered = 0usize;
    let mut attempts = 0usize;
    while (covered as f64) / total < max_coverage && attempts < 10_000 {
        attempts += 1;
        let y = rng.gen_range(0..=side - patch_side);
        let x = rng.gen_range(0..=side - patch_side);
        let overlaps = (0..patch_side)
            .any(|dy| (0..patch_side).any(|dx| occupied[(y + dy) * side + x + dx]));
        if overlaps {
            continue;
        }
        for dy in 0..patch_side {
            for dx in 0..patch_side {
                occupied[(y + dy) * side + x + dx] = true;
                for ch in 0..image.channels() {
                    occluded.set(0, ch, y + dy, x + dx, OCCLUSION_FILL);
                }
            }
        }
        covered += patch_side * patch_side;
        let trace = net.forward(&occluded, false)?;
        confidences.push(trace.probs[target] as f64);
        coverage.push(covered as f64 / total);
        patches.push((y, x));
    }
    Ok(OcclusionResult { base_confidence, confidences, coverage, patches })
}

pub fn default_patch_side(image_side: usize) -> usize {
    image_side.div_ceil(8)
}

// ------------------------------------------------------------ sanity check

#[derive(Debug, Clone)]
pub struct SanityResult {
    pub classes: Vec<usize>,
    /// Per-class explanation heatmap; absent when w_j is empty.
    pub heatmaps: Vec<Option<Heatmap>>,
    /// dissimilarity[a][b] = 1 - Pearson(h_a, h_b); None when either map is
    /// absent.
    pub dissimilarity: Vec<Vec<Option<f64>>>,
}

/// 1 - Pearson correlation of two equally sized maps. Constant maps have
/// no correlation; identical constants count as 0, otherwise 1.
pub fn heatmap_dissimilarity(a: &Heatmap, b: &Heatmap) -> f64 {
    let n = a.values.len() as f64;
    let ma = a.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        if a.values == b.values {
            0.0
        } else {
            1.0
        }
    } else {
        1.0 - cov / (va.sqrt() * vb.sqrt())
    }
}

/// Explanation heatmaps with the class forced to each member of the set,
/// plus their pairwise dissimilarities.
pub fn sanity_check(
    net: &Network,
    w: &RelevanceMatrix,
    image: &Tensor,
    classes: &[usize],
    k: usize,
) -> Result<SanityResult, EvalError> {
    let mut heatmaps = Vec::with_capacity(classes.len());
    for &j in classes {
        heatmaps.push(explanation_heatmap(net, w, image, HeatmapMode::Ours, k, Some(j))?);
    }
    let mut dissimilarity = vec![vec![None; classes.len()]; classes.len()];
    for a in 0..classes.len() {
        for b in 0..classes.len() {
            if let (Some(ha), Some(hb)) = (&heatmaps[a], &heatmaps[b]) {
                dissimilarity[a][b] = Some(heatmap_dissimilarity(ha, hb));
            }
        }
    }
    Ok(SanityResult { classes: classes.to_vec(), heatmaps, dissimilarity })
}

// ---------------------------------------------------------- reconstruction

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// Per-class ROC-AUC; None when the class is absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub mean_auc: f64,
}

/// Rank-based ROC-AUC (average ranks on ties).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    Some((rank_sum - npos as f64 * (npos as f64 + 1.0) / 2.0) / (npos as f64 * nneg as f64))
}

/// Mean ROC-AUC over classes of the scores X^T w_j against the one-hot
/// labels, on a held-out matrix pair.
pub fn reconstruction_auc(mats: &DatasetMatrices, w: &RelevanceMatrix) -> ReconstructionResult {
    let mut per_class = Vec::with_capacity(mats.c);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for j in 0..mats.c {
        let wj = w.dense_column(j);
        let mut scores = Vec::with_capacity(mats.n);
        let mut labels = Vec::with_capacity(mats.n);
        for i in 0..mats.n {
            let x = mats.x_column(i);
            scores.push(x.iter().zip(&wj).map(|(a, b)| a * b).sum::<f64>());
            labels.push(mats.l_column(i)[j] > 0.5);
        }
        let auc = roc_auc(&scores, &labels);
        if let Some(a) = auc {
            sum += a;
            counted += 1;
        }
        per_class.push(auc);
    }
    ReconstructionResult {
        per_class,
        mean_auc: if counted == 0 { 0.0 } else { sum / counted as f64 },
    }
}

// ------------------------------------------------------------- statistics

/// One-sided 95% critical values of Student's t, df 1..=30; the normal
/// value 1.645 beyond.
fn t_critical_95(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812, 1.796, 1.782, 1.771,
        1.761, 1.753, 1.746, 1.740, 1.734, 1.729, 1.725, 1.721, 1.717, 1.714, 1.711, 1.708, 1.706,
        1.703, 1.701, 1.699, 1.697,
    ];
    if df == 0 {
        f64::INFINITY
    } else if df <= 30 {
        TABLE[df - 1]
    } else {
        1.645
    }
}

/// Paired one-sided test that mean(a) > mean(b) at the 95% level. Returns
/// the t statistic and the decision.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return (0.0, false);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return (if mean > 0.0 { f64::INFINITY } else { 0.0 }, mean > 0.0);
    }
    let t = mean / (var / n as f64).sqrt();
    (t, t > t_critical_95(n - 1))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

// -------------------------------------------------------------- reporting

/// Tab-separated table with a header row.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join("\t"))?;
    for row in rows {
        writeln!(f, "{}", row.join("\t"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataSample;
    use crate::network::Blueprint;
    use rand::Rng;

    fn tiny_net() -> Network {
        let mut net = Network::build(1, 8, 2, &[
            Blueprint::Conv { kernel: 3, stride: 1, pad: 0, out: 3 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Flatten,
            Blueprint::Fc { outputs: 4 },
            Blueprint::Relu,
            Blueprint::FcClasses,
            Blueprint::Softmax,
        ])
        .unwrap();
        net.init_weights(17);
        net
    }

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((1, 1, 8, 8), (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny_dataset(n: usize) -> LabeledDataset {
        LabeledDataset {
            samples: (0..n)
                .map(|i| DataSample {
                    image: rand_image(1000 + i as u64),
                    label: i % 2,
                    mask_path: None,
                    fold: None,
                })
                .collect(),
            class_names: vec!["0".into(), "1".into()],
        }
    }

    #[test]
    fn iou_basic_properties() {
        let a = vec![true, true, false, false];
        let b = vec![true, false, true, false];
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert_eq!(iou(&[false, false], &[false, false]), 0.0);
        assert_eq!(iou(&[true, false], &[false, true]), 0.0);
    }

    fn heatmap_of(values: Vec<f32>, side: usize) -> Heatmap {
        Heatmap {
            values,
            height: side,
            width: side,
            source: FeatureId { layer: 0, filter: 0 },
            mode: HeatmapMode::Ours,
            norm_min: 0.0,
            norm_max: 1.0,
        }
    }

    #[test]
    fn heatmap_equal_to_mask_scores_full_auc() {
        let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let h = heatmap_of(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), 8);
        let taus = default_thresholds();
        let r = iou_curve(&[(&h, mask.as_slice())], &taus, 0);
        assert!(r.mean_iou.iter().all(|&v| v == 1.0));
        assert!((r.auc_percent - 100.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_half_heatmap_hand_integration() {
        // mask fraction a = 16/64; heatmap constant 0.5:
        // IoU = a for tau <= 0.5, 0 above
        let mask: Vec<bool> = (0..64).map(|i| i < 16).collect();
        let a = 0.25;
        let h = heatmap_of(vec![0.5; 64], 8);
        let taus = default_thresholds();
        let r = iou_curve(&[(&h, mask.as_slice())], &taus, 0);
        for (i, &tau) in taus.iter().enumerate() {
            let want = if tau <= 0.5 { a } else { 0.0 };
            assert!((r.mean_iou[i] - want).abs() < 1e-12, "tau {tau}");
        }
        // trapezoid by hand over the 19-point grid: full a up to 0.50,
        // one half-step triangle between 0.50 and 0.55, zero after
        let want_auc = 100.0 * (a * 0.45 + 0.5 * a * 0.05) / 0.9;
        assert!((r.auc_percent - want_auc).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_excluded_and_counted() {
        let h = heatmap_of(vec![1.0; 64], 8);
        let empty = vec![false; 64];
        let full: Vec<bool> = vec![true; 64];
        let taus = default_thresholds();
        let r = iou_curve(&[(&h, empty.as_slice()), (&h, full.as_slice())], &taus, 0);
        assert_eq!(r.excluded, 1);
        assert!(r.mean_iou.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ablation_step_zero_is_original_accuracy() {
        let net = tiny_net();
        let ds = tiny_dataset(10);
        let feats = vec![FeatureId { layer: 0, filter: 0 }, FeatureId { layer: 0, filter: 1 }];
        let original = accuracy(&net, &ds).unwrap();
        let curve = ablation_curve(&net, &feats, &ds, &[0, 1, 2], "All").unwrap();
        assert_eq!(curve.accuracy[0], original);
    }

    #[test]
    fn ablation_schedule_validation() {
        let net = tiny_net();
        let ds = tiny_dataset(4);
        let feats = vec![FeatureId { layer: 0, filter: 0 }];
        assert!(matches!(
            ablation_curve(&net, &feats, &ds, &[1, 0], "All"),
            Err(EvalError::BadSchedule)
        ));
        assert!(matches!(
            ablation_curve(&net, &feats, &ds, &[2], "All"),
            Err(EvalError::ScheduleExceedsPool { .. })
        ));
    }

    #[test]
    fn zeroing_everything_gives_constant_predictor() {
        let net = tiny_net();
        let ds = tiny_dataset(10);
        let mut all = Vec::new();
        for &layer in &net.feature_layers() {
            let count = net.layers[layer].unit_count().unwrap();
            for filter in 0..count {
                all.push(FeatureId { layer, filter });
            }
        }
        let ablated = net.zero_filters(&all).unwrap();
        let mut preds = std::collections::HashSet::new();
        for s in &ds.samples {
            preds.insert(ablated.forward(&s.image, false).unwrap().predicted);
        }
        assert_eq!(preds.len(), 1);
        let constant = *preds.iter().next().unwrap();
        let rate = ds.samples.iter().filter(|s| s.label == constant).count() as f64 / ds.len() as f64;
        assert_eq!(accuracy(&ablated, &ds).unwrap(), rate);
    }

    #[test]
    fn random_ablation_averages_over_seeds() {
        let net = tiny_net();
        let ds = tiny_dataset(6);
        let pool: Vec<FeatureId> = (0..3).map(|f| FeatureId { layer: 0, filter: f }).collect();
        let curve = random_ablation_curve(&net, &pool, &ds, &[0, 3], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(curve.accuracy.len(), 2);
        // step 0 and full removal are seed-independent
        assert!((curve.accuracy[0] - accuracy(&net, &ds).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn occlusion_patches_disjoint_and_coverage_bounded() {
        let net = tiny_net();
        let img = rand_image(77);
        let h = heatmap_of((0..64).map(|i| i as f32 / 63.0).collect(), 8);
        let r = occlusion_study(&net, &h, &img, 2, 0.30).unwrap();
        assert!(!r.patches.is_empty());
        let mut seen = vec![false; 64];
        for &(y, x) in &r.patches {
            for dy in 0..2 {
                for dx in 0..2 {
                    assert!(!seen[(y + dy) * 8 + x + dx], "overlap at {y},{x}");
                    seen[(y + dy) * 8 + x + dx] = true;
                }
            }
        }
        let last = *r.coverage.last().unwrap();
        assert!(last <= 0.30 + 4.0 / 64.0 + 1e-12);
        assert!(last >= 0.30 || r.patches.len() == r.coverage.len());
    }

    #[test]
    fn occlusion_oversized_patch_rejected() {
        let net = tiny_net();
        let img = rand_image(7);
        let h = heatmap_of(vec![0.5; 64], 8);
        assert!(matches!(
            occlusion_study(&net, &h, &img, 9, 0.3),
            Err(EvalError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn occlusion_greedy_picks_highest_mass_first() {
        let net = tiny_net();
        let img = rand_image(8);
        let mut values = vec![0.0f32; 64];
        // all mass in the 2x2 block at (4, 6)
        for (y, x) in [(4, 6), (4, 7), (5, 6), (5, 7)] {
            values[y * 8 + x] = 1.0;
        }
        let h = heatmap_of(values, 8);
        let r = occlusion_study(&net, &h, &img, 2, 0.1).unwrap();
        assert_eq!(r.patches[0], (4, 6));
    }

    #[test]
    fn random_occlusion_is_seeded_and_disjoint() {
        let net = tiny_net();
        let img = rand_image(9);
        let a = occlusion_random(&net, &img, 2, 0.3, 5).unwrap();
        let b = occlusion_random(&net, &img, 2, 0.3, 5).unwrap();
        assert_eq!(a.patches, b.patches);
        let mut seen = vec![false; 64];
        for &(y, x) in &a.patches {
            for dy in 0..2 {
                for dx in 0..2 {
                    assert!(!seen[(y + dy) * 8 + x + dx]);
                    seen[(y + dy) * 8 + x + dx] = true;
                }
            }
        }
    }

    #[test]
    fn self_dissimilarity_is_zero() {
        let h = heatmap_of((0..64).map(|i| (i % 7) as f32 / 6.0).collect(), 8);
        assert!(heatmap_dissimilarity(&h, &h).abs() < 1e-12);
    }

    #[test]
    fn dissimilarity_of_anticorrelated_maps_is_two() {
        let a = heatmap_of((0..64).map(|i| i as f32 / 63.0).collect(), 8);
        let b = heatmap_of((0..64).map(|i| 1.0 - i as f32 / 63.0).collect(), 8);
        assert!((heatmap_dissimilarity(&a, &b) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn sanity_matrix_permutes_with_class_order() {
        let net = tiny_net();
        let layout = DescriptorLayout::for_network(&net);
        let m = layout.m();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let columns: Vec<Vec<(usize, f64)>> = (0..2)
            .map(|_| (0..m).map(|i| (i, rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let w = RelevanceMatrix { m, c: 2, mu: 5.0, columns };
        let img = rand_image(12);
        let fwd = sanity_check(&net, &w, &img, &[0, 1], 3).unwrap();
        let rev = sanity_check(&net, &w, &img, &[1, 0], 3).unwrap();
        assert_eq!(fwd.dissimilarity[0][1], rev.dissimilarity[1][0]);
        assert!(fwd.dissimilarity[0][0].unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_class_column_flagged_in_sanity() {
        let net = tiny_net();
        let layout = DescriptorLayout::for_network(&net);
        let w = RelevanceMatrix {
            m: layout.m(),
            c: 2,
            mu: 5.0,
            columns: vec![vec![(0, 1.0)], vec![]],
        };
        let r = sanity_check(&net, &w, &rand_image(13), &[0, 1], 3).unwrap();
        assert!(r.heatmaps[0].is_some());
        assert!(r.heatmaps[1].is_none());
        assert_eq!(r.dissimilarity[0][1], None);
    }

    #[test]
    fn roc_auc_perfect_and_chance() {
        let labels: Vec<bool> = (0..1000).map(|i| i % 4 == 0).collect();
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert_eq!(roc_auc(&perfect, &labels), Some(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let random: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let auc = roc_auc(&random, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn roc_auc_tie_handling() {
        // scores [1, 1, 0], labels [+, -, -]: positive ties one negative,
        // beats the other: AUC = (1 + 0.5) / 2
        let auc = roc_auc(&[1.0, 1.0, 0.0], &[true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_auc_degenerate_labels() {
        assert_eq!(roc_auc(&[0.3, 0.4], &[true, true]), None);
        assert_eq!(roc_auc(&[0.3, 0.4], &[false, false]), None);
    }

    #[test]
    fn reconstruction_auc_on_ideal_scores() {
        // X = identity-ish: descriptor i one-hot for class i%2
        let m = 2;
        let n = 8;
        let c = 2;
        let mut x = Vec::new();
        let mut l = vec![0.0; c * n];
        for i in 0..n {
            let j = i % 2;
            x.extend(if j == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
            l[i * c + j] = 1.0;
        }
        let layout = DescriptorLayout { segments: vec![(0, 2)] };
        let mats = DatasetMatrices { m, n, c, x, l, layout };
        let w = RelevanceMatrix {
            m,
            c,
            mu: 1.0,
            columns: vec![vec![(0, 1.0)], vec![(1, 1.0)]],
        };
        let r = reconstruction_auc(&mats, &w);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mean_auc, 1.0);
    }

    #[test]
    fn paired_t_detects_a_clear_shift() {
        let a: Vec<f64> = (0..20).map(|i| 1.0 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 0.5 + 0.01 * i as f64).collect();
        let (t, sig) = paired_t_greater(&a, &b);
        assert!(sig, "t = {t}");
        let (_, sig_rev) = paired_t_greater(&b, &a);
        assert!(!sig_rev);
    }

    #[test]
    fn curve_auc_of_constant_one_is_hundred() {
        let xs: Vec<f64> = default_thresholds();
        let ys = vec![1.0; xs.len()];
        assert!((curve_auc_percent(&xs, &ys) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn tsv_written_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        write_tsv(&path, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a\tb\n1\t2\n");
    }
}
