//! Localization-map plugins: each method turns (network, input, class)
//! into a single normalized map at the network's final feature tap.
//!
//! Gradient-based methods backpropagate the raw class score with parameter
//! accumulation disabled, so explanation passes never dirty optimizer
//! state. New methods plug in through [`CamPlugin`] without touching
//! callers.

use std::collections::{BTreeMap, BTreeSet};

use aufer_core::align::FeatureStack;
use aufer_core::cams::{cam, gradcam, gradcampp, layercam, HigherOrderTerms};
use aufer_core::map::Map2;

use crate::error::ToolkitError;
use crate::model::{Network, Tensor4};

/// One localization method. Implementations must be pure given the
/// network's current parameters.
pub trait CamPlugin: Send + Sync {
    fn id(&self) -> &str;
    /// Computes the class-`k` map at the network's CAM tap for a
    /// single-sample input. The map is min-max normalized to `[0, 1]`.
    fn compute(&self, net: &mut Network, input: &Tensor4, k: usize) -> Result<Map2, ToolkitError>;
}

/// Method lookup by id. `builtin()` registers the four shipped methods;
/// `register` accepts additional ones (same id replaces).
pub struct CamRegistry {
    plugins: Vec<Box<dyn CamPlugin>>,
}

impl CamRegistry {
    pub fn builtin() -> CamRegistry {
        CamRegistry {
            plugins: vec![
                Box::new(WeightCam),
                Box::new(GradCam),
                Box::new(GradCamPP),
                Box::new(LayerCam),
            ],
        }
    }

    pub fn register(&mut self, plugin: Box<dyn CamPlugin>) {
        if let Some(slot) = self.plugins.iter_mut().find(|p| p.id() == plugin.id()) {
            *slot = plugin;
        } else {
            self.plugins.push(plugin);
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.id()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn CamPlugin, ToolkitError> {
        self.plugins
            .iter()
            .find(|p| p.id() == id)
            .map(|p| p.as_ref())
            .ok_or_else(|| {
                ToolkitError::UnknownCamMethod(format!(
                    "{id:?} (known methods: {})",
                    self.ids().join(", ")
                ))
            })
    }
}

fn stack_from_tap(id: &str, t: &Tensor4) -> FeatureStack {
    assert_eq!(t.n(), 1, "CAM plugins take single-sample inputs");
    let (_, c, h, w) = t.shape();
    FeatureStack::new(id, c, h, w, t.sample(0).to_vec())
}

/// Forward pass recording the CAM tap.
fn forward_features(net: &mut Network, input: &Tensor4) -> FeatureStack {
    let tap = net.cam_tap_id().to_string();
    let mut want = BTreeSet::new();
    want.insert(tap.clone());
    let pass = net.forward(input, false, &want);
    stack_from_tap(&tap, &pass.taps[&tap])
}

/// Forward plus a raw-score backward for class `k`: returns the tap
/// features and the gradient of the class score with respect to them.
fn forward_score_grads(
    net: &mut Network,
    input: &Tensor4,
    k: usize,
) -> Result<(FeatureStack, FeatureStack), ToolkitError> {
    let classes = net.num_classes();
    if k >= classes {
        return Err(ToolkitError::Eval(format!("class {k} out of range (num_classes {classes})")));
    }
    let tap = net.cam_tap_id().to_string();
    let mut want = BTreeSet::new();
    want.insert(tap.clone());
    net.forward(input, false, &want);
    let mut d_logits = vec![vec![0.0; classes]];
    d_logits[0][k] = 1.0;
    let mut collect = BTreeSet::new();
    collect.insert(tap.clone());
    let mut grads = net.backward(&d_logits, &BTreeMap::new(), &collect, false);
    let grad = grads.remove(&tap).expect("collected tap gradient");
    // Rerun the forward to re-read the tap activations (the backward sweep
    // consumed the cached intermediates).
    let feats = forward_features(net, input);
    Ok((stack_from_tap(&tap, &grad), feats))
}

fn cam_err(method: &str, e: aufer_core::cams::CamError) -> ToolkitError {
    ToolkitError::Eval(format!("{method}: {e}"))
}

/// Classic weight-based map: needs a global-average-pool + linear head.
struct WeightCam;

impl CamPlugin for WeightCam {
    fn id(&self) -> &str {
        "cam"
    }

    fn compute(&self, net: &mut Network, input: &Tensor4, k: usize) -> Result<Map2, ToolkitError> {
        let weights = net.head_weights().ok_or_else(|| ToolkitError::ArchitectureMismatch {
            method: "cam".to_string(),
            backbone: net.backbone().to_string(),
        })?;
        let features = forward_features(net, input);
        cam(&features, &weights, k).map_err(|e| cam_err("cam", e))
    }
}

struct GradCam;

impl CamPlugin for GradCam {
    fn id(&self) -> &str {
        "gradcam"
    }

    fn compute(&self, net: &mut Network, input: &Tensor4, k: usize) -> Result<Map2, ToolkitError> {
        let (grads, features) = forward_score_grads(net, input, k)?;
        gradcam(&features, &grads).map_err(|e| cam_err("gradcam", e))
    }
}

struct GradCamPP;

impl CamPlugin for GradCamPP {
    fn id(&self) -> &str {
        "gradcampp"
    }

    fn compute(&self, net: &mut Network, input: &Tensor4, k: usize) -> Result<Map2, ToolkitError> {
        let (grads, features) = forward_score_grads(net, input, k)?;
        let higher = HigherOrderTerms::from_score_grads(&grads);
        gradcampp(&features, &grads, &higher).map_err(|e| cam_err("gradcampp", e))
    }
}

struct LayerCam;

impl CamPlugin for LayerCam {
    fn id(&self) -> &str {
        "layercam"
    }

    fn compute(&self, net: &mut Network, input: &Tensor4, k: usize) -> Result<Map2, ToolkitError> {
        let (grads, features) = forward_score_grads(net, input, k)?;
        layercam(&features, &grads).map_err(|e| cam_err("layercam", e))
    }
}
