//! Backbone networks with named feature taps.
//!
//! A [`Network`] is a straight-line stack of layers plus a set of taps:
//! named points whose activations can be recorded on the way forward and
//! can receive extra gradient on the way back. Attention alignment trains
//! against tap activations; CAM methods read the tap that feeds the
//! classifier head.

mod layers;
mod tensor;

pub use layers::{BatchNorm2d, Bottleneck, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Relu};
pub use tensor::{Param, Tensor4};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use aufer_core::cams::ClassWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::ToolkitError;

/// Result of one forward pass.
pub struct ForwardPass {
    /// Raw class scores, one row per sample.
    pub logits: Vec<Vec<f64>>,
    /// Row-wise log-softmax of the logits.
    pub log_probs: Vec<Vec<f64>>,
    /// Activations recorded at the requested taps.
    pub taps: BTreeMap<String, Tensor4>,
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

pub struct Network {
    backbone: String,
    num_classes: usize,
    layers: Vec<Box<dyn Layer>>,
    /// `(layer index, tap id)`: the tap exposes the output of that layer.
    taps: Vec<(usize, String)>,
    /// Tap whose activations feed global average pooling, hence the tap CAM
    /// methods explain.
    cam_tap: String,
}

pub const BACKBONES: &[&str] = &["small_cnn", "resnet50"];

impl Network {
    /// Builds a backbone by id with seeded parameter initialization.
    pub fn from_backbone(id: &str, num_classes: usize, seed: u64) -> Result<Network, ToolkitError> {
        match id {
            "small_cnn" => Ok(Network::small_cnn(num_classes, seed)),
            "resnet50" => Ok(Network::resnet50(num_classes, seed)),
            other => Err(ToolkitError::Config {
                field: "model.backbone".into(),
                message: format!("unknown backbone {other:?}; known: {}", BACKBONES.join(", ")),
            }),
        }
    }

    /// Four 3x3 conv blocks (16, 32, 64, 128 channels), each followed by
    /// 2x2 max pooling, then GAP and a linear head. Taps `block1..block4`
    /// expose each block's post-ReLU activations; `pool4` is the GAP input.
    pub fn small_cnn(num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut taps = Vec::new();
        let widths = [16usize, 32, 64, 128];
        let mut in_c = 3;
        for (bi, &out_c) in widths.iter().enumerate() {
            let b = bi + 1;
            layers.push(Box::new(Conv2d::new(format!("conv{b}"), in_c, out_c, 3, 1, 1, true, &mut rng)));
            layers.push(Box::new(Relu::new(format!("relu{b}"))));
            taps.push((layers.len() - 1, format!("block{b}")));
            layers.push(Box::new(MaxPool2d::new(format!("pool{b}"), 2, 2, 0)));
            in_c = out_c;
        }
        taps.push((layers.len() - 1, "pool4".to_string()));
        layers.push(Box::new(GlobalAvgPool::new("gap")));
        layers.push(Box::new(Linear::new("fc", 128, num_classes, &mut rng)));
        Network {
            backbone: "small_cnn".into(),
            num_classes,
            layers,
            taps,
            cam_tap: "pool4".into(),
        }
    }

    /// Standard 50-layer residual network (3-4-6-3 bottlenecks). Taps
    /// `layer1..layer5` expose the stem ReLU and each stage's output;
    /// `layer5` feeds GAP and is the CAM tap.
    pub fn resnet50(num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut taps = Vec::new();

        layers.push(Box::new(Conv2d::new("stem", 3, 64, 7, 2, 3, false, &mut rng)));
        layers.push(Box::new(BatchNorm2d::new("stem_bn", 64)));
        layers.push(Box::new(Relu::new("stem_relu")));
        taps.push((layers.len() - 1, "layer1".to_string()));
        layers.push(Box::new(MaxPool2d::new("stem_pool", 3, 2, 1)));

        let stages: [(usize, usize, usize, usize); 4] =
            [(3, 64, 256, 1), (4, 128, 512, 2), (6, 256, 1024, 2), (3, 512, 2048, 2)];
        let mut in_c = 64;
        for (si, &(blocks, width, out_c, stride)) in stages.iter().enumerate() {
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layers.push(Box::new(Bottleneck::new(
                    format!("stage{}.{}", si + 2, b),
                    in_c,
                    width,
                    out_c,
                    s,
                    &mut rng,
                )));
                in_c = out_c;
            }
            taps.push((layers.len() - 1, format!("layer{}", si + 2)));
        }
        layers.push(Box::new(GlobalAvgPool::new("gap")));
        layers.push(Box::new(Linear::new("fc", 2048, num_classes, &mut rng)));
        Network {
            backbone: "resnet50".into(),
            num_classes,
            layers,
            taps,
            cam_tap: "layer5".into(),
        }
    }

    /// Small stack whose head is a 1x1 convolution instead of GAP+linear,
    /// for exercising the architecture requirements of weight-based maps.
    #[cfg(test)]
    pub(crate) fn headless_for_tests(num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Box<dyn Layer>> = vec![
            Box::new(Conv2d::new("conv1", 3, 8, 3, 1, 1, true, &mut rng)),
            Box::new(Relu::new("relu1")),
            Box::new(MaxPool2d::new("pool1", 2, 2, 0)),
            Box::new(GlobalAvgPool::new("pool")),
            Box::new(Conv2d::new("head", 8, num_classes, 1, 1, 0, true, &mut rng)),
        ];
        let taps = vec![(1usize, "feat".to_string())];
        Network {
            backbone: "headless_test".into(),
            num_classes,
            layers,
            taps,
            cam_tap: "feat".into(),
        }
    }

    pub fn backbone(&self) -> &str {
        &self.backbone
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Tap ids in network order.
    pub fn tap_ids(&self) -> Vec<&str> {
        self.taps.iter().map(|(_, id)| id.as_str()).collect()
    }

    pub fn has_tap(&self, id: &str) -> bool {
        self.taps.iter().any(|(_, t)| t == id)
    }

    /// The tap whose activations feed the classifier head.
    pub fn cam_tap_id(&self) -> &str {
        &self.cam_tap
    }

    /// True when the head is exactly GAP followed by one linear layer, the
    /// shape weight-based CAM requires.
    pub fn has_gap_linear_head(&self) -> bool {
        let n = self.layers.len();
        n >= 2
            && self.layers[n - 2].name() == "gap"
            && self.layers[n - 1].name() == "fc"
    }

    /// Class weights of the linear head over GAP channels.
    pub fn head_weights(&self) -> Option<ClassWeights> {
        if !self.has_gap_linear_head() {
            return None;
        }
        let lin = self.layers.last()?;
        let weight = lin.params().into_iter().find(|p| p.name.ends_with(".weight"))?;
        let channels = weight.value.len() / self.num_classes;
        Some(ClassWeights::new(self.num_classes, channels, weight.value.clone()))
    }

    /// Runs the stack, recording activations for every tap named in `want`.
    pub fn forward(&mut self, x: &Tensor4, train: bool, want: &BTreeSet<String>) -> ForwardPass {
        let mut taps = BTreeMap::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, train);
            if let Some((_, id)) = self.taps.iter().find(|(li, _)| *li == i) {
                if want.contains(id.as_str()) {
                    taps.insert(id.clone(), cur.clone());
                }
            }
        }
        let n = cur.n();
        assert_eq!(cur.sample_len(), self.num_classes, "head output is one score per class");
        let logits: Vec<Vec<f64>> = (0..n).map(|i| cur.sample(i).to_vec()).collect();
        let log_probs = logits.iter().map(|row| log_softmax(row)).collect();
        ForwardPass { logits, log_probs, taps }
    }

    /// Backpropagates `d_logits`, adding `inject[id]` to the running
    /// gradient when the sweep reaches tap `id`, and returning the gradient
    /// with respect to each tap in `collect` (before injection).
    ///
    /// With `accumulate` false, parameter gradients are left untouched;
    /// explanation passes use this to probe gradients without dirtying the
    /// optimizer state.
    pub fn backward(
        &mut self,
        d_logits: &[Vec<f64>],
        inject: &BTreeMap<String, Tensor4>,
        collect: &BTreeSet<String>,
        accumulate: bool,
    ) -> BTreeMap<String, Tensor4> {
        for id in inject.keys() {
            assert!(self.has_tap(id), "inject names unknown tap {id:?}");
        }
        let n = d_logits.len();
        let mut grad = Tensor4::zeros(n, self.num_classes, 1, 1);
        for (i, row) in d_logits.iter().enumerate() {
            assert_eq!(row.len(), self.num_classes);
            grad.sample_mut(i).copy_from_slice(row);
        }
        let mut collected = BTreeMap::new();
        for i in (0..self.layers.len()).rev() {
            // `grad` currently holds dL/d(output of layers[i]).
            if let Some((_, id)) = self.taps.iter().find(|(li, _)| *li == i) {
                if collect.contains(id.as_str()) {
                    collected.insert(id.clone(), grad.clone());
                }
                if let Some(extra) = inject.get(id.as_str()) {
                    grad.add_assign(extra);
                }
            }
            grad = self.layers[i].backward(&grad, accumulate);
        }
        collected
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    // -- checkpoints --------------------------------------------------------

    /// Writes all parameters (including running statistics) to one file.
    pub fn save(&self, path: &Path) -> Result<(), ToolkitError> {
        let params = self.params();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"AUNW");
        buf.push(1u8);
        write_str(&mut buf, &self.backbone);
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            write_str(&mut buf, &p.name);
            buf.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
            for &v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir).map_err(|e| ToolkitError::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
        ));
        {
            let mut f = fs::File::create(&tmp).map_err(|e| ToolkitError::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| ToolkitError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| ToolkitError::io(path, e))
    }

    /// Reconstructs a network from a checkpoint written by [`Network::save`].
    pub fn load(path: &Path) -> Result<Network, ToolkitError> {
        let buf = fs::read(path).map_err(|e| ToolkitError::io(path, e))?;
        let fail = |m: String| ToolkitError::Checkpoint { path: path.to_path_buf(), message: m };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ToolkitError> {
            if *pos + n > buf.len() {
                return Err(ToolkitError::Checkpoint {
                    path: path.to_path_buf(),
                    message: "truncated checkpoint".into(),
                });
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"AUNW" {
            return Err(fail("not a checkpoint file".into()));
        }
        if take(&mut pos, 1)?[0] != 1 {
            return Err(fail("unsupported checkpoint version".into()));
        }
        let backbone = read_str(&buf, &mut pos).map_err(|m| fail(m))?;
        let num_classes = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let n_params = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..n_params {
            let name = read_str(&buf, &mut pos).map_err(|m| fail(m))?;
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, len * 8)?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.insert(name, vals);
        }
        if pos != buf.len() {
            return Err(fail("trailing bytes after parameters".into()));
        }

        let mut net = Network::from_backbone(&backbone, num_classes, 0)?;
        let mut missing = Vec::new();
        for p in net.params_mut() {
            match entries.remove(&p.name) {
                Some(v) if v.len() == p.value.len() => p.value = v,
                Some(v) => {
                    return Err(fail(format!(
                        "param {} has {} values, expected {}",
                        p.name,
                        v.len(),
                        p.value.len()
                    )))
                }
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(fail(format!("missing params: {}", missing.join(", "))));
        }
        if !entries.is_empty() {
            let extra: Vec<String> = entries.keys().cloned().collect();
            return Err(fail(format!("unknown params: {}", extra.join(", "))));
        }
        Ok(net)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(buf: &[u8], pos: &mut usize) -> Result<String, String> {
    if *pos + 4 > buf.len() {
        return Err("truncated string length".into());
    }
    let len = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    if *pos + len > buf.len() {
        return Err("truncated string".into());
    }
    let s = String::from_utf8(buf[*pos..*pos + len].to_vec()).map_err(|_| "non-utf8 string")?;
    *pos += len;
    Ok(s)
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}
