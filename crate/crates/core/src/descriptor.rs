//! Per-image internal response descriptors and the dataset matrices consumed
//! by the sparse selector.
//!
//! A descriptor concatenates, in layer order, the per-layer L1-normalized
//! vectors of channel L2 norms from every conv/fc layer outside the
//! classifier tail. When a relu immediately follows a layer, the rectified
//! response is read.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::network::{ActivationTrace, FeatureId, LayerKind, ModelError, Network};
use crate::tensor::channel_l2;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("trace was captured without activation recording")]
    NotCaptured,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("flat index {index} out of range for descriptor length {m}")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("feature (layer {layer}, filter {filter}) is not part of the descriptor layout")]
    UnknownFeature { layer: usize, filter: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Maps flat descriptor indices back to (layer, filter) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorLayout {
    /// Ordered (layer index, channel count) segments.
    pub segments: Vec<(usize, usize)>,
}

impl DescriptorLayout {
    pub fn for_network(net: &Network) -> DescriptorLayout {
        let segments = net
            .feature_layers()
            .into_iter()
            .map(|i| (i, net.layers[i].unit_count().expect("feature layers are parametric")))
            .collect();
        DescriptorLayout { segments }
    }

    /// Total descriptor length m.
    pub fn m(&self) -> usize {
        self.segments.iter().map(|&(_, c)| c).sum()
    }

    pub fn feature_of_index(&self, flat: usize) -> Result<FeatureId, DescriptorError> {
        let mut rest = flat;
        for &(layer, count) in &self.segments {
            if rest < count {
                return Ok(FeatureId { layer, filter: rest });
            }
            rest -= count;
        }
        Err(DescriptorError::IndexOutOfRange { index: flat, m: self.m() })
    }

    pub fn index_of_feature(&self, f: FeatureId) -> Result<usize, DescriptorError> {
        let mut base = 0usize;
        for &(layer, count) in &self.segments {
            if layer == f.layer {
                if f.filter < count {
                    return Ok(base + f.filter);
                }
                break;
            }
            base += count;
        }
        Err(DescriptorError::UnknownFeature { layer: f.layer, filter: f.filter })
    }
}

#[derive(Debug, Clone)]
pub struct ResponseDescriptor {
    pub values: Vec<f64>,
    pub layout: DescriptorLayout,
}

/// Extracts the descriptor from a captured trace. `post_relu` selects whether
/// a layer's response is read after an immediately following relu.
pub fn extract_descriptor_with(
    trace: &ActivationTrace,
    net: &Network,
    post_relu: bool,
) -> Result<ResponseDescriptor, DescriptorError> {
    if !trace.captured() {
        return Err(DescriptorError::NotCaptured);
    }
    let layout = DescriptorLayout::for_network(net);
    let mut values = Vec::with_capacity(layout.m());
    for &(layer, _count) in &layout.segments {
        let read_at = if post_relu
            && layer + 1 < net.layers.len()
            && matches!(net.layers[layer + 1].kind, LayerKind::Relu)
        {
            layer + 1
        } else {
            layer
        };
        let norms = channel_l2(&trace.outputs[read_at]).map_err(ModelError::from)?;
        let sum: f64 = norms.iter().sum();
        if sum > 0.0 {
            values.extend(norms.iter().map(|v| v / sum));
        } else {
            // all-zero layer stays all-zero; the solver treats it as uninformative
            values.extend(norms);
        }
    }
    Ok(ResponseDescriptor { values, layout })
}

pub fn extract_descriptor(trace: &ActivationTrace, net: &Network) -> Result<ResponseDescriptor, DescriptorError> {
    extract_descriptor_with(trace, net, true)
}

/// X (m x N, column i = descriptor of image i) and the one-hot label matrix
/// L (C x N), both stored column-major.
#[derive(Debug, Clone)]
pub struct DatasetMatrices {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    pub x: Vec<f64>,
    pub l: Vec<f64>,
    pub layout: DescriptorLayout,
}

impl DatasetMatrices {
    pub fn x_column(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    pub fn l_column(&self, i: usize) -> &[f64] {
        &self.l[i * self.c..(i + 1) * self.c]
    }
}

pub fn build_matrices(net: &Network, dataset: &LabeledDataset) -> Result<DatasetMatrices, DescriptorError> {
    let layout = DescriptorLayout::for_network(net);
    let m = layout.m();
    let c = dataset.class_count();
    let n = dataset.len();
    let mut x = Vec::with_capacity(m * n);
    let mut l = vec![0.0f64; c * n];
    for (i, sample) in dataset.samples.iter().enumerate() {
        if sample.label >= c {
            return Err(DescriptorError::LabelOutOfRange { label: sample.label, classes: c });
        }
        let trace = net.forward(&sample.image, true)?;
        let desc = extract_descriptor(&trace, net)?;
        x.extend_from_slice(&desc.values);
        l[i * c + sample.label] = 1.0;
    }
    Ok(DatasetMatrices { m, n, c, x, l, layout })
}

/// Text dump: header "m N C", then X (m rows of N), then L (C rows of N).
pub fn dump_matrices(mats: &DatasetMatrices, path: &Path) -> Result<(), DescriptorError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{} {} {}", mats.m, mats.n, mats.c)?;
    for row in 0..mats.m {
        let line: Vec<String> = (0..mats.n).map(|i| mats.x[i * mats.m + row].to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    for row in 0..mats.c {
        let line: Vec<String> = (0..mats.n).map(|i| mats.l[i * mats.c + row].to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a dump back. The file carries no layer layout, so the returned
/// layout holds a single anonymous segment; use the network's layout when
/// indices must map back to features.
pub fn load_matrices(path: &Path) -> Result<DatasetMatrices, DescriptorError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| {
        DescriptorError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {msg}", path.display()),
        ))
    };
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad header")))
        .collect::<Result<_, _>>()?;
    let [m, n, c] = dims[..] else { return Err(bad("header must be 'm N C'")) };
    let mut read_rows = |rows: usize| -> Result<Vec<f64>, DescriptorError> {
        // stored column-major like the in-memory form
        let mut out = vec![0.0f64; rows * n];
        for row in 0..rows {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_, _>>()?;
            if vals.len() != n {
                return Err(bad("row length mismatch"));
            }
            for (i, v) in vals.into_iter().enumerate() {
                out[i * rows + row] = v;
            }
        }
        Ok(out)
    };
    let x = read_rows(m)?;
    let l = read_rows(c)?;
    Ok(DatasetMatrices { m, n, c, x, l, layout: DescriptorLayout { segments: vec![(0, m)] } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataSample;
    use crate::network::Blueprint;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> Network {
        let mut net = Network::build(1, 6, 2, &[
            Blueprint::Conv { kernel: 3, stride: 1, pad: 0, out: 4 },
            Blueprint::Relu,
            Blueprint::Pool { window: 2, stride: 2 },
            Blueprint::Flatten,
            Blueprint::Fc { outputs: 8 },
            Blueprint::Relu,
            Blueprint::FcClasses,
            Blueprint::Softmax,
        ])
        .unwrap();
        net.init_weights(5);
        net
    }

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((1, 1, 6, 6), (0..36).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layout_counts_and_roundtrip() {
        let net = small_net();
        let layout = DescriptorLayout::for_network(&net);
        // conv(4) + fc(8); the class fc and softmax are tail
        assert_eq!(layout.segments, vec![(0, 4), (4, 8)]);
        assert_eq!(layout.m(), 12);
        for flat in 0..layout.m() {
            let f = layout.feature_of_index(flat).unwrap();
            assert_eq!(layout.index_of_feature(f).unwrap(), flat);
        }
        assert_eq!(layout.feature_of_index(0).unwrap(), FeatureId { layer: 0, filter: 0 });
        assert!(layout.feature_of_index(12).is_err());
    }

    #[test]
    fn segment_boundaries_match_prefix_sums() {
        let net = small_net();
        let layout = DescriptorLayout::for_network(&net);
        let mut prefix = 0usize;
        for &(layer, count) in &layout.segments {
            assert_eq!(layout.feature_of_index(prefix).unwrap(), FeatureId { layer, filter: 0 });
            prefix += count;
        }
        assert_eq!(prefix, layout.m());
    }

    #[test]
    fn hand_computed_two_unit_segment() {
        // one fc layer with two 1x1 "channels" valued (3, 4) -> (3/7, 4/7)
        let norms = [3.0f64, 4.0];
        let sum: f64 = norms.iter().sum();
        let seg: Vec<f64> = norms.iter().map(|v| v / sum).collect();
        assert!((seg[0] - 3.0 / 7.0).abs() < 1e-12);
        assert!((seg[1] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn segments_l1_normalized_or_zero() {
        let net = small_net();
        let trace = net.forward(&rand_image(1), true).unwrap();
        let desc = extract_descriptor(&trace, &net).unwrap();
        assert_eq!(desc.values.len(), 12);
        assert!(desc.values.iter().all(|&v| v >= 0.0));
        let mut base = 0usize;
        for &(_, count) in &desc.layout.segments {
            let sum: f64 = desc.values[base..base + count].iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() <= 1e-6, "segment sum {sum}");
            base += count;
        }
    }

    #[test]
    fn zero_image_yields_zero_conv_segment() {
        let net = small_net(); // zero biases, so zero input -> zero activations
        let trace = net.forward(&Tensor::zeros(1, 1, 6, 6), true).unwrap();
        let desc = extract_descriptor(&trace, &net).unwrap();
        assert!(desc.values[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_matches_naive_oracle() {
        let net = small_net();
        let trace = net.forward(&rand_image(2), true).unwrap();
        let desc = extract_descriptor(&trace, &net).unwrap();

        // naive recomputation: post-relu channel L2 norms, per-layer L1 scale
        let mut expect = Vec::new();
        for &(layer, _) in &desc.layout.segments {
            let t = &trace.outputs[layer + 1]; // relu follows both feature layers here
            let mut norms = Vec::new();
            for c in 0..t.channels() {
                let mut acc = 0.0f64;
                for y in 0..t.height() {
                    for x in 0..t.width() {
                        let v = t.at(0, c, y, x) as f64;
                        acc += v * v;
                    }
                }
                norms.push(acc.sqrt());
            }
            let sum: f64 = norms.iter().sum();
            expect.extend(norms.iter().map(|v| if sum > 0.0 { v / sum } else { 0.0 }));
        }
        for (a, b) in desc.values.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "descriptor {a} vs oracle {b}");
        }
    }

    #[test]
    fn uncaptured_trace_rejected() {
        let net = small_net();
        let trace = net.forward(&rand_image(3), false).unwrap();
        assert!(matches!(extract_descriptor(&trace, &net), Err(DescriptorError::NotCaptured)));
    }

    #[test]
    fn matrices_columns_follow_dataset_order() {
        let net = small_net();
        let samples = vec![
            DataSample { image: rand_image(1), label: 0, mask_path: None, fold: None },
            DataSample { image: rand_image(2), label: 1, mask_path: None, fold: None },
            DataSample { image: rand_image(3), label: 1, mask_path: None, fold: None },
        ];
        let ds = LabeledDataset { samples, class_names: vec!["a".into(), "b".into()] };
        let mats = build_matrices(&net, &ds).unwrap();
        assert_eq!((mats.m, mats.n, mats.c), (12, 3, 2));
        for (i, sample) in ds.samples.iter().enumerate() {
            let trace = net.forward(&sample.image, true).unwrap();
            let desc = extract_descriptor(&trace, &net).unwrap();
            assert_eq!(mats.x_column(i), desc.values.as_slice());
            let lc = mats.l_column(i);
            assert_eq!(lc.iter().sum::<f64>(), 1.0);
            assert_eq!(lc[sample.label], 1.0);
        }
    }

    #[test]
    fn reordering_images_permutes_columns() {
        let net = small_net();
        let s = |seed| DataSample { image: rand_image(seed), label: 0, mask_path: None, fold: None };
        let ds1 = LabeledDataset { samples: vec![s(1), s(2)], class_names: vec!["a".into()] };
        let ds2 = LabeledDataset { samples: vec![s(2), s(1)], class_names: vec!["a".into()] };
        let m1 = build_matrices(&net, &ds1).unwrap();
        let m2 = build_matrices(&net, &ds2).unwrap();
        assert_eq!(m1.x_column(0), m2.x_column(1));
        assert_eq!(m1.x_column(1), m2.x_column(0));
    }

    #[test]
    fn matrix_dump_roundtrips() {
        let net = small_net();
        let s = |seed, label| DataSample { image: rand_image(seed), label, mask_path: None, fold: None };
        let ds = LabeledDataset {
            samples: vec![s(4, 0), s(5, 1), s(6, 0)],
            class_names: vec!["a".into(), "b".into()],
        };
        let mats = build_matrices(&net, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mats.txt");
        dump_matrices(&mats, &path).unwrap();
        let back = load_matrices(&path).unwrap();
        assert_eq!((back.m, back.n, back.c), (mats.m, mats.n, mats.c));
        assert_eq!(back.x, mats.x);
        assert_eq!(back.l, mats.l);
    }
}
