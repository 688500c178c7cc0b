//! Finite-difference checks of every trainable component at toy widths.
//!
//! Each component's output is projected onto fixed random weights so the
//! check sees a scalar that depends on every output element.

use cbhvt_tensor::gradcheck::{check_gradients, check_param_gradients, GradCheckReport, DEFAULT_TOLERANCE};
use cbhvt_tensor::{Array, Builder, Param, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ctx::Ctx;
use crate::error::Result;
use crate::generators::{AttentionRefine, FeatureMap, ResidualBlock, TransformerStage};
use crate::heads::{bce, cross_entropy, l1, DetectionHead, SegmentationHead};
use crate::merging::{FusionBlock, FusionSpec, Fpn, TerminalPooling};
use crate::region::{generate_anchors, LevelShape, RpnHead};

/// Coordinates sampled per parameter tensor.
pub const COORDS_PER_PARAM: usize = 6;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_relative_error: f64,
    pub passed: bool,
    pub checks: Vec<GradCheckReport>,
}

impl ComponentReport {
    fn new(component: &str, checks: Vec<GradCheckReport>) -> Self {
        let max = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
        Self {
            component: component.to_string(),
            max_relative_error: max,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

pub const COMPONENTS: [&str; 11] = [
    "residual_block",
    "attention_refine",
    "transformer_stage",
    "fusion_block",
    "fpn",
    "rpn_head",
    "detection_head",
    "segmentation_head",
    "loss_cross_entropy",
    "loss_l1",
    "loss_bce",
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(out * w)` for fixed random `w`.
fn project(out: &Tensor, w: &Array) -> Result<Tensor> {
    Ok(out.mul(&Tensor::constant(w.clone()))?.sum_all()?)
}

/// Parameter and input checks for one module under a fixed projection.
fn module_checks(
    params: &[Param],
    inputs: &[Array],
    forward: impl Fn(&[Tensor]) -> Result<Tensor>,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    // Zero-initialised biases would put whole ReLU inputs exactly on the kink.
    for p in params {
        p.update(|a| a.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
    }
    let probe = forward(&inputs.iter().cloned().map(Tensor::constant).collect::<Vec<_>>())?;
    let w = random(&mut rng, probe.shape());
    let consts: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
    let mut reports = check_param_gradients(
        || Ok(project(&forward(&consts).map_err(to_tensor_err)?, &w).map_err(to_tensor_err)?),
        params,
        Some(COORDS_PER_PARAM),
        seed,
        DEFAULT_TOLERANCE,
    )?;
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    reports.extend(check_gradients(
        &names,
        |xs| project(&forward(xs).map_err(to_tensor_err)?, &w).map_err(to_tensor_err),
        inputs,
        DEFAULT_TOLERANCE,
    )?);
    Ok(reports)
}

fn to_tensor_err(e: crate::Error) -> cbhvt_tensor::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => cbhvt_tensor::Error::InvalidInput(other.to_string()),
    }
}

fn builder(store: &ParamStore, seed: u64, name: &str) -> Builder {
    Builder::new(store, seed).sub(name)
}

pub fn check_component(name: &str, seed: u64) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    let ctx = Ctx::train();
    let checks = match name {
        "residual_block" => {
            let block = ResidualBlock::new(&builder(&store, seed, name), 3, 4, 2)?;
            module_checks(&store.trainable(), &[random(&mut rng, &[3, 6, 6])], |x| block.forward(&x[0], &ctx), seed)?
        }
        "attention_refine" => {
            let att = AttentionRefine::new(&builder(&store, seed, name), 6, 2)?;
            module_checks(&store.trainable(), &[random(&mut rng, &[6, 5, 5])], |x| att.forward(&x[0], &ctx), seed)?
        }
        "transformer_stage" => {
            let stage = TransformerStage::new(&builder(&store, seed, name), 3, 4, 2, 2, 1, 1, 2, 2)?;
            module_checks(&store.trainable(), &[random(&mut rng, &[3, 8, 8])], |x| stage.forward(&x[0], &ctx), seed)?
        }
        "fusion_block" => {
            let spec = FusionSpec {
                layers: vec![(3, 5), (1, 3)],
                terminal_pooling: TerminalPooling::Max3x3Stride1,
            };
            let block = FusionBlock::new(&builder(&store, seed, name), 6, &spec)?;
            module_checks(
                &store.trainable(),
                &[random(&mut rng, &[6, 5, 5])],
                |x| {
                    let level = FeatureMap {
                        tensor: x[0].clone(),
                        stride: 4,
                    };
                    Ok(block.forward(&level, &ctx)?.tensor)
                },
                seed,
            )?
        }
        "fpn" => {
            let chans = [3, 4, 5, 6];
            let fpn = Fpn::new(&builder(&store, seed, name), &chans, 3)?;
            let inputs: Vec<Array> = chans
                .iter()
                .enumerate()
                .map(|(i, &c)| random(&mut rng, &[c, 8 >> i, 8 >> i]))
                .collect();
            module_checks(
                &store.trainable(),
                &inputs,
                |x| {
                    let levels: Vec<FeatureMap> = x
                        .iter()
                        .enumerate()
                        .map(|(i, t)| FeatureMap {
                            tensor: t.clone(),
                            stride: 4 << i,
                        })
                        .collect();
                    let out = fpn.forward(&levels)?;
                    let flat = out
                        .iter()
                        .map(|l| Ok(l.tensor.reshape(&[l.tensor.len()])?))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Tensor::concat(&flat, 0)?)
                },
                seed,
            )?
        }
        "rpn_head" => {
            let rpn = RpnHead::new(&builder(&store, seed, name), 3, 2)?;
            let shapes: Vec<LevelShape> = (0..2).map(|i| LevelShape { h: 4 >> i, w: 4 >> i, stride: 4 << i }).collect();
            let anchors = generate_anchors(&shapes, &[8.0, 16.0], &[1.0])?;
            let inputs: Vec<Array> = shapes.iter().map(|s| random(&mut rng, &[3, s.h, s.w])).collect();
            module_checks(
                &store.trainable(),
                &inputs,
                |x| {
                    let levels: Vec<FeatureMap> = x
                        .iter()
                        .zip(&shapes)
                        .map(|(t, s)| FeatureMap {
                            tensor: t.clone(),
                            stride: s.stride,
                        })
                        .collect();
                    let out = rpn.forward(&levels, &anchors)?;
                    let n = out.logits.len();
                    Ok(Tensor::concat(&[out.logits.reshape(&[n, 1])?, out.deltas], 1)?)
                },
                seed,
            )?
        }
        "detection_head" => {
            let head = DetectionHead::new(&builder(&store, seed, name), 2 * 7 * 7, 8, 2)?;
            module_checks(
                &store.trainable(),
                &[random(&mut rng, &[3, 2, 7, 7])],
                |x| {
                    let out = head.forward(&x[0], &ctx)?;
                    Ok(Tensor::concat(&[out.class_probs, out.box_deltas], 1)?)
                },
                seed,
            )?
        }
        "segmentation_head" => {
            let head = SegmentationHead::new(&builder(&store, seed, name), 2, 3, 2)?;
            module_checks(&store.trainable(), &[random(&mut rng, &[2, 2, 14, 14])], |x| head.forward(&x[0]), seed)?
        }
        "loss_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            check_gradients(
                &["logits"],
                |x| cross_entropy(&x[0].softmax(1)?, &labels).map_err(to_tensor_err),
                &[random(&mut rng, &[4, 3])],
                DEFAULT_TOLERANCE,
            )?
        }
        "loss_l1" => {
            let target = random(&mut rng, &[5, 4]);
            check_gradients(
                &["pred"],
                |x| l1(&x[0], &target).map_err(to_tensor_err),
                &[random(&mut rng, &[5, 4])],
                DEFAULT_TOLERANCE,
            )?
        }
        "loss_bce" => {
            let target = Array::from_fn([3, 4], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
            check_gradients(
                &["logits"],
                |x| bce(&x[0].sigmoid()?, &target).map_err(to_tensor_err),
                &[random(&mut rng, &[3, 4])],
                DEFAULT_TOLERANCE,
            )?
        }
        other => {
            return crate::error::config_err(format!("unknown component {other:?}; valid: {}", COMPONENTS.join(", ")));
        }
    };
    Ok(ComponentReport::new(name, checks))
}

/// Every component in [`COMPONENTS`].
pub fn run_suite(seed: u64) -> Result<Vec<ComponentReport>> {
    COMPONENTS.iter().map(|c| check_component(c, seed)).collect()
}
