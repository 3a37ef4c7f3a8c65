//! Test-time explanations: predict a class, rank the class's relevant
//! features by their response on this image, and render one heatmap per
//! selected feature. Also training-time interpretation through averaged
//! receptive-field patches.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::deconv::{feature_heatmap, BackwardPolicy, DeconvError, Heatmap};
use crate::descriptor::{extract_descriptor, DescriptorError, DescriptorLayout};
use crate::network::{FeatureId, LayerKind, ModelError, Network};
use crate::selector::{relevant_features, RelevanceMatrix, SolverError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Deconv(#[from] DeconvError),
    #[error(transparent)]
    Selector(#[from] SolverError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("k must be at least 1")]
    BadK,
    #[error("weight matrix has {got} rows but the network descriptor has {want}")]
    LayoutMismatch { got: usize, want: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RankedFeature {
    pub feature: FeatureId,
    /// r = w_j[i] * x[i], the feature's contribution to the explained class.
    pub response: f64,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub predicted_class: usize,
    pub explained_class: usize,
    pub confidence: f32,
    pub ranked: Vec<RankedFeature>,
    pub requested_k: usize,
    /// Set when fewer than `requested_k` nonzero weights were available.
    pub truncated: bool,
}

/// Explains the predicted class of `image` with its top-k responding
/// relevant features.
pub fn explain_image(
    net: &Network,
    w: &RelevanceMatrix,
    image: &Tensor,
    k: usize,
) -> Result<Explanation, ExplainError> {
    explain_image_with(net, w, image, k, None, BackwardPolicy::ours())
}

/// Like `explain_image` but with an optional forced class (sanity checks)
/// and an explicit backward policy.
pub fn explain_image_with(
    net: &Network,
    w: &RelevanceMatrix,
    image: &Tensor,
    k: usize,
    force_class: Option<usize>,
    policy: BackwardPolicy,
) -> Result<Explanation, ExplainError> {
    if k == 0 {
        return Err(ExplainError::BadK);
    }
    let layout = DescriptorLayout::for_network(net);
    if w.m != layout.m() {
        return Err(ExplainError::LayoutMismatch { got: w.m, want: layout.m() });
    }
    let trace = net.forward(image, true)?;
    let predicted = trace.predicted;
    let class = force_class.unwrap_or(predicted);
    if class >= w.c {
        return Err(ExplainError::ClassOutOfRange { class, classes: w.c });
    }
    let desc = extract_descriptor(&trace, net)?;

    let mut scored: Vec<(FeatureId, f64)> = Vec::with_capacity(w.nnz(class));
    for &(i, weight) in w.column(class) {
        let feature = layout.feature_of_index(i)?;
        scored.push((feature, weight * desc.values[i]));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| (a.0.layer, a.0.filter).cmp(&(b.0.layer, b.0.filter)))
    });
    let truncated = k > scored.len();
    scored.truncate(k);

    let mut ranked = Vec::with_capacity(scored.len());
    for (feature, response) in scored {
        let heatmap = feature_heatmap(net, &trace, feature, policy)?;
        ranked.push(RankedFeature { feature, response, heatmap });
    }
    Ok(Explanation {
        predicted_class: predicted,
        explained_class: class,
        confidence: trace.probs[class],
        ranked,
        requested_k: k,
        truncated,
    })
}

/// Inclusive input-space rectangle seen by one spatial unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    /// Unclipped top-left corner (may be negative with padding).
    pub raw_y0: isize,
    pub raw_x0: isize,
    /// Side of the unclipped square window.
    pub nominal_side: usize,
    pub full_image: bool,
}

/// Maps an output location at layer `p` back to the input pixels that can
/// influence it. Any fc or flatten layer at or below `p` widens the field
/// to the whole image.
pub fn receptive_field(net: &Network, p: usize, location: (usize, usize)) -> Result<ReceptiveField, ExplainError> {
    if p >= net.layers.len() {
        return Err(ExplainError::Model(ModelError::Invalid(format!("layer {p} out of range"))));
    }
    let side = net.input_side;
    let full = ReceptiveField {
        y0: 0,
        x0: 0,
        y1: side - 1,
        x1: side - 1,
        raw_y0: 0,
        raw_x0: 0,
        nominal_side: side,
        full_image: true,
    };
    // interval [a, b] of influencing coordinates, tracked per axis
    let (mut ay, mut by) = (location.0 as isize, location.0 as isize);
    let (mut ax, mut bx) = (location.1 as isize, location.1 as isize);
    let mut nominal = 1isize;
    let mut jump = 1isize;
    for i in (0..=p).rev() {
        let (m, s, o) = match &net.layers[i].kind {
            LayerKind::Conv(spec) => (spec.kernel as isize, spec.stride as isize, spec.pad as isize),
            LayerKind::MaxPool { window, stride } => (*window as isize, *stride as isize, 0),
            LayerKind::Relu | LayerKind::Softmax => continue,
            LayerKind::Flatten | LayerKind::Fc { .. } => return Ok(full),
        };
        ay = ay * s - o;
        ax = ax * s - o;
        by = by * s - o + m - 1;
        bx = bx * s - o + m - 1;
    }
    // nominal side from the forward recursion rf' = rf + (M-1) * jump
    for i in 0..=p {
        match &net.layers[i].kind {
            LayerKind::Conv(spec) => {
                nominal += (spec.kernel as isize - 1) * jump;
                jump *= spec.stride as isize;
            }
            LayerKind::MaxPool { window, stride } => {
                nominal += (*window as isize - 1) * jump;
                jump *= *stride as isize;
            }
            _ => {}
        }
    }
    let clamp = |v: isize| v.clamp(0, side as isize - 1) as usize;
    Ok(ReceptiveField {
        y0: clamp(ay),
        x0: clamp(ax),
        y1: clamp(by),
        x1: clamp(bx),
        raw_y0: ay,
        raw_x0: ax,
        nominal_side: nominal as usize,
        full_image: false,
    })
}

/// Crops a square window of `side` pixels anchored at the unclipped corner,
/// zero-filling outside the image.
pub fn crop_patch(image: &Tensor, raw_y0: isize, raw_x0: isize, side: usize) -> Tensor {
    let (_, c, h, w) = image.shape();
    let mut out = Tensor::zeros(1, c, side, side);
    for ch in 0..c {
        for dy in 0..side {
            let y = raw_y0 + dy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..side {
                let x = raw_x0 + dx as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                out.set(0, ch, dy, dx, image.at(0, ch, y as usize, x as usize));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AverageVisualization {
    pub feature: FeatureId,
    pub class: usize,
    /// Mean receptive-field patch, shape (1, C, side, side).
    pub patch: Tensor,
    pub contributing: usize,
}

/// How images are ranked when picking the top-n patch pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchRanking {
    /// Layer-normalized descriptor entry (consistent with how W was fit).
    DescriptorEntry,
    /// Raw channel activation magnitude.
    RawActivation,
}

pub fn average_visualization(
    net: &Network,
    w: &RelevanceMatrix,
    class: usize,
    dataset: &LabeledDataset,
    top_n: usize,
) -> Result<Vec<AverageVisualization>, ExplainError> {
    average_visualization_with(net, w, class, dataset, top_n, PatchRanking::DescriptorEntry)
}

pub fn average_visualization_with(
    net: &Network,
    w: &RelevanceMatrix,
    class: usize,
    dataset: &LabeledDataset,
    top_n: usize,
    ranking: PatchRanking,
) -> Result<Vec<AverageVisualization>, ExplainError> {
    if top_n == 0 {
        return Err(ExplainError::BadK);
    }
    if class >= w.c {
        return Err(ExplainError::ClassOutOfRange { class, classes: w.c });
    }
    let layout = DescriptorLayout::for_network(net);
    if w.m != layout.m() {
        return Err(ExplainError::LayoutMismatch { got: w.m, want: layout.m() });
    }

    // pool is class-restricted; forward every candidate once
    let pool: Vec<&Tensor> = dataset
        .samples
        .iter()
        .filter(|s| s.label == class)
        .map(|s| &s.image)
        .collect();
    let mut traces = Vec::with_capacity(pool.len());
    let mut descs = Vec::with_capacity(pool.len());
    for img in &pool {
        let trace = net.forward(img, true)?;
        descs.push(extract_descriptor(&trace, net)?);
        traces.push(trace);
    }

    let features = relevant_features(w, class, &layout)?;
    let mut out = Vec::with_capacity(features.len());
    for (feature, _) in features {
        let idx = layout.index_of_feature(feature)?;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let score = |i: usize| -> f64 {
            match ranking {
                PatchRanking::DescriptorEntry => descs[i].values[idx],
                PatchRanking::RawActivation => {
                    let act = &traces[i].outputs[feature.layer];
                    act.plane(0, feature.filter).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
                }
            }
        };
        order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        order.truncate(top_n);

        let mut mean: Option<Vec<f64>> = None;
        let mut side = net.input_side;
        let mut channels = net.input_channels;
        for &i in &order {
            let act = &traces[i].outputs[feature.layer];
            // argmax activation location, row-major tie break
            let plane = act.plane(0, feature.filter);
            let mut best = 0usize;
            for (pos, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = pos;
                }
            }
            let loc = (best / act.width(), best % act.width());
            let rf = receptive_field(net, feature.layer, loc)?;
            let patch = if rf.full_image {
                pool[i].clone()
            } else {
                crop_patch(pool[i], rf.raw_y0, rf.raw_x0, rf.nominal_side)
            };
            let (_, c, h, _) = patch.shape();
            side = h;
            channels = c;
            let acc = mean.get_or_insert_with(|| vec![0.0f64; patch.data().len()]);
            for (a, &v) in acc.iter_mut().zip(patch.data()) {
                *a += v as f64;
            }
        }
        let contributing = order.len();
        let data = match mean {
            Some(acc) => acc.iter().map(|&v| (v / contributing as f64) as f32).collect(),
            None => vec![0.0f32; channels * side * side],
        };
        let patch = Tensor::from_vec((1, channels, side, side), data)?;
        out.push(AverageVisualization { feature, class, patch, contributing });
    }
    Ok(out)
}

/// Writes the bundle consumed downstream: `prediction.txt`,
/// `feature_<rank>_L<p>F<q>.png` heatmaps, and `manifest.tsv` with the
/// per-feature responses.
pub fn write_explanation_bundle(
    expl: &Explanation,
    class_names: &[String],
    dir: &Path,
) -> Result<(), ExplainError> {
    std::fs::create_dir_all(dir)?;
    let name = class_names
        .get(expl.explained_class)
        .map(String::as_str)
        .unwrap_or("?");
    let mut f = std::fs::File::create(dir.join("prediction.txt"))?;
    writeln!(f, "class {}", expl.explained_class)?;
    writeln!(f, "label {name}")?;
    writeln!(f, "confidence {}", expl.confidence)?;

    let mut manifest = std::fs::File::create(dir.join("manifest.tsv"))?;
    writeln!(manifest, "rank\tlayer\tfilter\tresponse")?;
    for (rank, rf) in expl.ranked.iter().enumerate() {
        let png = dir.join(format!("feature_{}_L{}F{}.png", rank, rf.feature.layer, rf.feature.filter));
        rf.heatmap.save_png(&png)?;
        writeln!(manifest, "{}\t{}\t{}\t{}", rank, rf.feature.layer, rf.feature.filter, rf.response)?;
    }
    Ok(())
}
