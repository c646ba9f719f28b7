//! A fuser followed by a linear classification head on the flattened `f_s`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{max_fusion, mean_fusion, zero_pad_conv_fusion, ConvFusionParams};
use crate::error::{Error, Result};
use crate::fusion::{BlockConfig, ModalitySet, TFusionBlock, Variant};
use crate::nn::{join, Linear, Params};
use crate::tensor::{numel, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserKind {
    Tfusion,
    TfusionNoCe,
    TfusionNoMa,
    Mean,
    Max,
    ConvPad,
}

impl FuserKind {
    pub const ALL: [FuserKind; 6] = [
        FuserKind::Tfusion,
        FuserKind::TfusionNoCe,
        FuserKind::TfusionNoMa,
        FuserKind::Mean,
        FuserKind::Max,
        FuserKind::ConvPad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FuserKind::Tfusion => "tfusion",
            FuserKind::TfusionNoCe => "tfusion_no_ce",
            FuserKind::TfusionNoMa => "tfusion_no_ma",
            FuserKind::Mean => "mean",
            FuserKind::Max => "max",
            FuserKind::ConvPad => "conv_pad",
        }
    }

    /// Block variant implied by this fuser; `tfusion` defers to the block config.
    pub fn variant(self, configured: Variant) -> Option<Variant> {
        match self {
            FuserKind::Tfusion => Some(configured),
            FuserKind::TfusionNoCe => Some(Variant::NoCe),
            FuserKind::TfusionNoMa => Some(Variant::NoMa),
            _ => None,
        }
    }
}

impl fmt::Display for FuserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FuserKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = match s {
            "no_ce" => "tfusion_no_ce",
            "no_ma" => "tfusion_no_ma",
            other => other,
        };
        FuserKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = FuserKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown fuser `{s}`; expected one of {}", names.join(", "))
        })
    }
}

/// Everything needed to build a model with the right shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fuser: FuserKind,
    pub total: usize,
    pub channels: usize,
    pub feature_shape: Vec<usize>,
    pub num_classes: usize,
    pub block: BlockConfig,
    pub conv_depth: usize,
}

#[derive(Clone, Debug)]
pub enum Fuser<T> {
    Block(TFusionBlock<T>),
    Mean,
    Max,
    Conv(ConvFusionParams<T>),
}

#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub kind: FuserKind,
    pub fuser: Fuser<T>,
    pub head: Linear<T>,
    pub feature_shape: Vec<usize>,
}

impl<T: Real> FusionModel<T> {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        if cfg.block.channels != cfg.channels {
            return Err(Error::Config {
                path: "block.channels".into(),
                msg: format!("block width {} differs from task channels {}", cfg.block.channels, cfg.channels),
            });
        }
        let fuser = match cfg.fuser {
            FuserKind::Mean => Fuser::Mean,
            FuserKind::Max => Fuser::Max,
            FuserKind::ConvPad => Fuser::Conv(ConvFusionParams::init(rng, cfg.total, cfg.channels, cfg.conv_depth)?),
            kind => {
                let block = BlockConfig {
                    variant: kind.variant(cfg.block.variant).expect("transformer fuser"),
                    ..cfg.block.clone()
                };
                Fuser::Block(TFusionBlock::init(rng, &block, cfg.total)?)
            }
        };
        let flat = cfg.channels * numel(&cfg.feature_shape);
        Ok(FusionModel {
            kind: cfg.fuser,
            fuser,
            head: Linear::init(rng, flat, cfg.num_classes),
            feature_shape: cfg.feature_shape.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    /// The shared representation `f_s`, `[B, C, R_f...]`.
    pub fn fused(&self, tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
        match &self.fuser {
            Fuser::Block(b) => b.forward(tape, input),
            Fuser::Mean => mean_fusion(tape, input),
            Fuser::Max => max_fusion(tape, input),
            Fuser::Conv(p) => zero_pad_conv_fusion(tape, input, p),
        }
    }

    /// Class scores `[B, num_classes]`.
    pub fn logits(&self, tape: &Tape<T>, input: &ModalitySet<T>) -> Result<Tensor<T>> {
        let fs = self.fused(tape, input)?;
        let b = fs.shape()[0];
        let flat = tape.reshape(&fs, &[b, fs.len() / b.max(1)])?;
        self.head.forward(tape, &flat)
    }
}

impl<T: Real> Params<T> for FusionModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match &self.fuser {
            Fuser::Block(b) => b.visit(&join(prefix, "fuser"), f),
            Fuser::Conv(c) => c.visit(&join(prefix, "fuser"), f),
            Fuser::Mean | Fuser::Max => {}
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.fuser {
            Fuser::Block(b) => b.visit_mut(&join(prefix, "fuser"), f),
            Fuser::Conv(c) => c.visit_mut(&join(prefix, "fuser"), f),
            Fuser::Mean | Fuser::Max => {}
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
