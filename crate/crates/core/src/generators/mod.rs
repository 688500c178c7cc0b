//! Channel generators: heterogeneous backbones that each turn an image into
//! a four-level feature pyramid (strides 4, 8, 16, 32).

mod attention;
mod autoencoder;
mod residual;
mod transformer;

use std::path::{Path, PathBuf};

use cbhvt_tensor::checkpoint::Checkpoint;
use cbhvt_tensor::{Builder, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use attention::{AttentionRefine, Gated, GATE_LOGIT_BOUND};
pub use autoencoder::{ConvAutoencoder, ConvBnRelu};
pub use residual::{ResNet, ResidualBlock};
pub use transformer::{
    map_to_tokens, tokens_to_map, Attended, Grid, PyramidTransformer, SpatialReductionAttention,
    TransformerBlock, TransformerStage, REFERENCE_INPUT,
};

use crate::ctx::Ctx;
use crate::error::{config_err, Error, Result};

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Residual,
    ResidualAttention,
    PyramidTransformer,
    ConvAutoencoder,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(json!(s)).map_err(|_| {
            Error::Config(format!(
                "unknown generator kind {s:?}; expected residual, residual_attention, \
                 pyramid_transformer or conv_autoencoder"
            ))
        })
    }
}

fn default_reduction() -> usize {
    4
}

fn default_heads() -> [usize; 4] {
    [1; 4]
}

fn default_sr() -> [usize; 4] {
    [8, 4, 2, 1]
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Member name, used as the parameter prefix.
    pub name: String,
    pub kind: GeneratorKind,
    pub depth_per_stage: [usize; 4],
    pub channels_per_stage: [usize; 4],
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
    #[serde(default = "default_reduction")]
    pub attention_reduction_ratio: usize,
    /// Defaults to frozen exactly when pretrained weights are given.
    #[serde(default)]
    pub freeze: Option<bool>,
    #[serde(default = "default_heads")]
    pub heads_per_stage: [usize; 4],
    #[serde(default = "default_sr")]
    pub reduction_per_stage: [usize; 4],
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl GeneratorConfig {
    pub fn new(name: &str, kind: GeneratorKind, depths: [usize; 4], channels: [usize; 4]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            depth_per_stage: depths,
            channels_per_stage: channels,
            pretrained_weights_path: None,
            attention_reduction_ratio: default_reduction(),
            freeze: None,
            heads_per_stage: default_heads(),
            reduction_per_stage: default_sr(),
            mlp_ratio: default_mlp_ratio(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze.unwrap_or(self.pretrained_weights_path.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains('.') {
            return config_err(format!("invalid generator name {:?}", self.name));
        }
        if self.depth_per_stage.contains(&0) || self.channels_per_stage.contains(&0) {
            return config_err(format!("{}: depths and channels must be positive", self.name));
        }
        if self.channels_per_stage.windows(2).any(|w| w[1] < w[0]) {
            return config_err(format!(
                "{}: channels {:?} must be non-decreasing",
                self.name, self.channels_per_stage
            ));
        }
        if self.kind == GeneratorKind::ResidualAttention
            && (self.attention_reduction_ratio == 0
                || self.attention_reduction_ratio > self.channels_per_stage[0])
        {
            return config_err(format!(
                "{}: attention reduction ratio {} exceeds {} channels",
                self.name, self.attention_reduction_ratio, self.channels_per_stage[0]
            ));
        }
        Ok(())
    }
}

/// A feature map tagged with its stride relative to the input image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn from_stages(stages: Vec<Tensor>) -> Self {
        Self {
            levels: stages
                .into_iter()
                .zip(STAGE_STRIDES)
                .map(|(tensor, stride)| FeatureMap { tensor, stride })
                .collect(),
        }
    }

    /// Checks stride and size invariants against an `h x w` input.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.levels.len() != 4 {
            return config_err(format!("pyramid has {} levels, expected 4", self.levels.len()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            let s = STAGE_STRIDES[i];
            let want = (h.div_ceil(s), w.div_ceil(s));
            if level.stride != s || level.size() != want {
                return config_err(format!(
                    "level {i}: stride {} size {:?}, expected stride {s} size {want:?}",
                    level.stride,
                    level.size()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Network {
    Residual(ResNet),
    Transformer(PyramidTransformer),
    Autoencoder(ConvAutoencoder),
}

/// A built channel generator with its parameters registered in a store.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    prefix: String,
    store: ParamStore,
    net: Network,
}

/// Builds a generator under `builder.sub(config.name)`. Pretrained weights
/// are loaded when configured; frozen members stop receiving gradients.
pub fn build_generator(config: &GeneratorConfig, builder: &Builder) -> Result<Generator> {
    config.validate()?;
    let b = builder.sub(&config.name);
    let (d, c) = (&config.depth_per_stage, &config.channels_per_stage);
    let net = match config.kind {
        GeneratorKind::Residual => Network::Residual(ResNet::new(&b, d, c, None)?),
        GeneratorKind::ResidualAttention => {
            Network::Residual(ResNet::new(&b, d, c, Some(config.attention_reduction_ratio))?)
        }
        GeneratorKind::PyramidTransformer => Network::Transformer(PyramidTransformer::new(
            &b,
            d,
            c,
            &config.heads_per_stage,
            &config.reduction_per_stage,
            config.mlp_ratio,
        )?),
        GeneratorKind::ConvAutoencoder => Network::Autoencoder(ConvAutoencoder::new(&b, d, c)?),
    };
    let g = Generator {
        config: config.clone(),
        prefix: b.prefix().to_string(),
        store: b.store().clone(),
        net,
    };
    if let Some(path) = &config.pretrained_weights_path {
        g.load_weights(path)?;
    }
    if config.is_frozen() {
        for p in g.store.with_prefix(&g.prefix) {
            p.set_trainable(false);
        }
    }
    Ok(g)
}

impl Generator {
    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_frozen(&self) -> bool {
        self.config.is_frozen()
    }

    /// Frozen members always run with inference-mode normalization.
    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<FeaturePyramid> {
        let ctx = if self.is_frozen() { ctx.with_train(false) } else { ctx.clone() };
        let stages = match &self.net {
            Network::Residual(n) => n.forward(image, &ctx)?,
            Network::Transformer(n) => n.forward(image, &ctx)?,
            Network::Autoencoder(n) => n.forward(image, &ctx)?,
        };
        Ok(FeaturePyramid::from_stages(stages))
    }

    pub fn autoencoder_mut(&mut self) -> Option<&mut ConvAutoencoder> {
        match &mut self.net {
            Network::Autoencoder(a) => Some(a),
            _ => None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let tensors = self
            .store
            .with_prefix(&self.prefix)
            .into_iter()
            .map(|p| (p.name()[self.prefix.len()..].to_string(), p.value().clone()))
            .collect();
        let mut echo = self.config.clone();
        echo.pretrained_weights_path = None;
        Checkpoint::new(
            json!({
                "type": "generator",
                "kind": self.config.kind,
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "config": echo,
            }),
            tensors,
        )
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let kind = ck.manifest.get("kind").cloned().unwrap_or_default();
        if kind != json!(self.config.kind) {
            return config_err(format!(
                "{}: checkpoint {} holds a {kind} generator, expected {:?}",
                self.config.name,
                path.display(),
                self.config.kind
            ));
        }
        self.store
            .load_named(&ck.tensors, &self.prefix)
            .map_err(|e| Error::from(e).context(format!("loading {}", path.display())))?;
        Ok(())
    }
}

/// Runs every member on the same image.
pub fn run_combo(members: &[Generator], image: &Tensor, ctx: &Ctx) -> Result<Vec<FeaturePyramid>> {
    members
        .iter()
        .map(|g| g.forward(image, ctx).map_err(|e| e.context(format!("generator {}", g.name()))))
        .collect()
}

/// Width and depth presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Toy widths that train on a CPU in minutes.
    #[default]
    Desk,
    /// The backbone sizes the method was published with.
    Full,
}

/// Configuration of a named backbone from the generator table.
pub fn backbone_config(model: &str, profile: Profile) -> Result<GeneratorConfig> {
    use GeneratorKind::*;
    let desk = profile == Profile::Desk;
    let (name, kind, depths, channels) = match model {
        "ResNet" | "ResNet-50" => (
            "resnet50",
            Residual,
            if desk { [1, 1, 1, 1] } else { [3, 4, 6, 3] },
            if desk { [8, 16, 32, 64] } else { [256, 512, 1024, 2048] },
        ),
        "ResNet-CBAM" => (
            "resnet_cbam",
            ResidualAttention,
            if desk { [1, 1, 1, 1] } else { [3, 4, 6, 3] },
            if desk { [8, 16, 32, 64] } else { [256, 512, 1024, 2048] },
        ),
        "ResNet-101" => (
            "resnet101",
            Residual,
            if desk { [1, 2, 2, 1] } else { [3, 4, 23, 3] },
            if desk { [8, 16, 32, 64] } else { [256, 512, 1024, 2048] },
        ),
        "ResNext" | "ResNeXt" => (
            "resnext",
            Residual,
            if desk { [1, 1, 1, 1] } else { [3, 4, 6, 3] },
            if desk { [12, 24, 48, 96] } else { [512, 1024, 2048, 4096] },
        ),
        "PVT" => (
            "pvt",
            PyramidTransformer,
            if desk { [1, 1, 1, 1] } else { [3, 4, 6, 3] },
            if desk { [8, 16, 32, 64] } else { [64, 128, 320, 512] },
        ),
        "Convolutional Autoencoder" | "ConvAutoencoder" => (
            "autoencoder",
            ConvAutoencoder,
            [1, 1, 1, 1],
            if desk { [8, 16, 32, 64] } else { [64, 128, 256, 512] },
        ),
        other => return config_err(format!("unknown backbone {other:?}")),
    };
    let mut cfg = GeneratorConfig::new(name, kind, depths, channels);
    if !desk {
        cfg.attention_reduction_ratio = 16;
        cfg.heads_per_stage = [1, 2, 5, 8];
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCombo {
    pub name: String,
    pub members: Vec<GeneratorConfig>,
}

/// Backbone lists of the six named generator combinations.
pub const COMBO_TABLE: [(&str, &[&str]); 6] = [
    ("Channel Generator-1", &["ResNet", "PVT"]),
    ("Channel Generator-2", &["ResNet-50", "ResNet-CBAM", "PVT", "Convolutional Autoencoder"]),
    ("Channel Generator-3", &["ResNet-50", "ResNet-CBAM", "ConvAutoencoder"]),
    ("Channel Generator-4", &["ResNet-50", "ResNet-CBAM", "PVT", "ResNet-101"]),
    ("Channel Generator-5", &["ResNet-50", "ResNet-CBAM", "ResNext", "ResNet-101"]),
    ("Channel Generator-6", &["ResNet-CBAM", "ResNext"]),
];

pub fn generator_combo(name: &str, profile: Profile) -> Result<GeneratorCombo> {
    let Some((_, members)) = COMBO_TABLE.iter().find(|(n, _)| *n == name) else {
        let valid: Vec<&str> = COMBO_TABLE.iter().map(|(n, _)| *n).collect();
        return config_err(format!("unknown generator combo {name:?}; valid: {}", valid.join(", ")));
    };
    Ok(GeneratorCombo {
        name: name.to_string(),
        members: members
            .iter()
            .map(|m| backbone_config(m, profile))
            .collect::<Result<_>>()?,
    })
}

pub fn build_combo(combo: &GeneratorCombo, builder: &Builder) -> Result<Vec<Generator>> {
    if !(2..=4).contains(&combo.members.len()) {
        return config_err(format!("{}: a combo needs 2 to 4 members", combo.name));
    }
    combo.members.iter().map(|m| build_generator(m, builder)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::Array;

    fn image(size: usize) -> Tensor {
        Tensor::constant(Array::from_fn([3, size, size], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5))
    }

    fn sizes(p: &FeaturePyramid) -> Vec<(usize, usize)> {
        p.levels.iter().map(FeatureMap::size).collect()
    }

    #[test]
    fn every_kind_yields_stride_4_to_32_pyramid() {
        let want = vec![(64, 64), (32, 32), (16, 16), (8, 8)];
        for model in ["ResNet", "ResNet-CBAM", "PVT", "ConvAutoencoder"] {
            let cfg = backbone_config(model, Profile::Desk).unwrap();
            let g = build_generator(&cfg, &Builder::new(&ParamStore::new(), 1)).unwrap();
            for size in [224, 256] {
                let p = g.forward(&image(size), &Ctx::eval()).unwrap();
                p.validate(size, size).unwrap();
                if size == 256 {
                    assert_eq!(sizes(&p), want, "{model}");
                }
            }
        }
    }

    #[test]
    fn combo_yields_one_pyramid_per_member() {
        let combo = generator_combo("Channel Generator-1", Profile::Desk).unwrap();
        let members = build_combo(&combo, &Builder::new(&ParamStore::new(), 2)).unwrap();
        assert_eq!(run_combo(&members, &image(64), &Ctx::eval()).unwrap().len(), 2);
    }

    #[test]
    fn combo_table_members() {
        let kinds = |n: &str| -> Vec<GeneratorKind> {
            generator_combo(n, Profile::Desk).unwrap().members.iter().map(|m| m.kind).collect()
        };
        use GeneratorKind::*;
        assert_eq!(kinds("Channel Generator-2"), [Residual, ResidualAttention, PyramidTransformer, ConvAutoencoder]);
        assert_eq!(kinds("Channel Generator-6"), [ResidualAttention, Residual]);
        assert!(generator_combo("Channel Generator-7", Profile::Desk).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = GeneratorConfig::new("a", GeneratorKind::ResidualAttention, [1; 4], [2, 4, 8, 8]);
        cfg.attention_reduction_ratio = 4;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        assert!("transformer".parse::<GeneratorKind>().is_err());
        assert_eq!("conv_autoencoder".parse::<GeneratorKind>().unwrap(), GeneratorKind::ConvAutoencoder);
    }

    #[test]
    fn frozen_members_are_not_trainable() {
        let store = ParamStore::new();
        let mut cfg = backbone_config("ResNet", Profile::Desk).unwrap();
        cfg.freeze = Some(true);
        let g = build_generator(&cfg, &Builder::new(&store, 3)).unwrap();
        assert!(g.is_frozen());
        assert!(store.with_prefix(g.prefix()).iter().all(|p| !p.is_trainable()));
    }

    #[test]
    fn wrong_kind_checkpoint_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let res = build_generator(&backbone_config("ResNet", Profile::Desk).unwrap(), &Builder::new(&ParamStore::new(), 4)).unwrap();
        res.save_weights(&path).unwrap();
        let mut ae = backbone_config("ConvAutoencoder", Profile::Desk).unwrap();
        ae.pretrained_weights_path = Some(path);
        assert_eq!(build_generator(&ae, &Builder::new(&ParamStore::new(), 4)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn autoencoder_decoder_reconstructs_full_resolution() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 5);
        let mut g = build_generator(&backbone_config("ConvAutoencoder", Profile::Desk).unwrap(), &b).unwrap();
        let ae = g.autoencoder_mut().unwrap();
        assert!(ae.reconstruct(&image(64), &Ctx::eval()).unwrap().is_none());
        ae.attach_decoder(&b.sub("decoder")).unwrap();
        let out = ae.reconstruct(&image(64), &Ctx::eval()).unwrap().unwrap();
        assert_eq!(out.shape(), [3, 64, 64]);
    }
}
