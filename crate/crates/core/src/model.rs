//! Complete depth models: the attention-fused network, modality subsets
//! with a concatenation decoder, and a ground-truth oracle fixture.

use echodepth_tensor::{Activation, Tensor, Var};

use crate::error::{Error, Result};
use crate::fusion::{combine_depth, log_l1_loss, AttentionNet, Fusion, FusionKind};
use crate::kv::{KvList, KvMap};
use crate::nets::{EchoDecoder, EchoEncoder, MaterialNet, NetConfig, UpStack, VisualNet};
use crate::params::{seeded_rng, Builder, Ctx, ParamStore};
use crate::scene::RenderedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub echo: bool,
    pub img: bool,
    pub mat: bool,
}

impl Modalities {
    pub const ECHO: Modalities = Modalities {
        echo: true,
        img: false,
        mat: false,
    };
    pub const IMG: Modalities = Modalities {
        echo: false,
        img: true,
        mat: false,
    };
    pub const ECHO_IMG: Modalities = Modalities {
        echo: true,
        img: true,
        mat: false,
    };
    pub const ECHO_MAT: Modalities = Modalities {
        echo: true,
        img: false,
        mat: true,
    };
    pub const ALL: Modalities = Modalities {
        echo: true,
        img: true,
        mat: true,
    };

    pub fn name(self) -> String {
        let parts: Vec<&str> = [(self.echo, "echo"), (self.img, "img"), (self.mat, "mat")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        parts.join("+")
    }
}

impl std::str::FromStr for Modalities {
    type Err = Error;
    /// `echo`, `img`, `mat` joined by `+` or `,`, or `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Modalities::ALL);
        }
        let mut m = Modalities {
            echo: false,
            img: false,
            mat: false,
        };
        for part in s.split(['+', ',']) {
            let slot = match part.trim() {
                "echo" => &mut m.echo,
                "img" => &mut m.img,
                "mat" => &mut m.mat,
                other => return Err(Error::Config(format!("unknown modality {other:?}"))),
            };
            if *slot {
                return Err(Error::Config(format!("modality {part:?} repeated")));
            }
            *slot = true;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Echo and visual depth maps blended by attention over a fused map.
    Fused(FusionKind),
    /// Selected modalities only; echo alone and image alone use their own
    /// networks, anything else a concatenation decoder.
    Subset(Modalities),
    /// Returns the ground truth; a test fixture with no parameters.
    Oracle,
}

impl ModelKind {
    pub fn describe(self) -> String {
        match self {
            ModelKind::Fused(f) => format!("fused-{}", f.name()),
            ModelKind::Subset(m) => format!("subset-{}", m.name()),
            ModelKind::Oracle => "oracle".into(),
        }
    }

    fn to_kv(self) -> KvList {
        let mut kv = KvList::new();
        match self {
            ModelKind::Fused(f) => {
                kv.push("model.kind", "fused");
                kv.push("model.fusion", f.name());
            }
            ModelKind::Subset(m) => {
                kv.push("model.kind", "subset");
                kv.push("model.modalities", m.name());
            }
            ModelKind::Oracle => kv.push("model.kind", "oracle"),
        }
        kv
    }

    fn from_kv(map: &KvMap) -> Result<Self> {
        let kind: String = map.require("model.kind")?;
        match kind.as_str() {
            "fused" => Ok(ModelKind::Fused(map.require("model.fusion")?)),
            "subset" => Ok(ModelKind::Subset(map.require("model.modalities")?)),
            "oracle" => Ok(ModelKind::Oracle),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Stacked network inputs and targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 2, P, Q]`.
    pub spec: Tensor,
    /// `[B, 3, W, W]`.
    pub image: Tensor,
    /// `[B, 1, W, W]`.
    pub depth: Tensor,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: &[&RenderedSample]) -> Result<Self> {
        Self::with_images(samples, |s| s.image.clone())
    }

    /// Like [`Batch::from_samples`] with each image replaced by `image(sample)`.
    pub fn with_images(samples: &[&RenderedSample], image: impl Fn(&RenderedSample) -> Tensor) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let w = first.size;
        let specs: Vec<&Tensor> = samples.iter().map(|s| &s.spectrogram.values).collect();
        let images: Vec<Tensor> = samples.iter().map(|s| image(s)).collect();
        let depths: Vec<Tensor> = samples
            .iter()
            .map(|s| Tensor::new(&[1, w, w], s.depth.clone()))
            .collect::<std::result::Result<_, _>>()?;
        let mask = samples.iter().flat_map(|s| s.valid_mask()).collect();
        Ok(Batch {
            spec: Tensor::stack(&specs)?,
            image: Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            depth: Tensor::stack(&depths.iter().collect::<Vec<_>>())?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ModelOutput {
    pub depth: Var,
    pub alpha: Option<Var>,
    pub echo_depth: Option<Var>,
    pub image_depth: Option<Var>,
}

#[derive(Debug, Clone)]
enum Parts {
    Fused {
        encoder: EchoEncoder,
        decoder: EchoDecoder,
        visual: VisualNet,
        material: MaterialNet,
        attention: AttentionNet,
        fusion: Fusion,
    },
    EchoOnly {
        encoder: EchoEncoder,
        decoder: EchoDecoder,
    },
    ImageOnly {
        visual: VisualNet,
    },
    Concat {
        encoder: Option<EchoEncoder>,
        visual: Option<VisualNet>,
        material: Option<MaterialNet>,
        decoder: UpStack,
    },
    Oracle,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub net: NetConfig,
    pub store: ParamStore,
    parts: Parts,
}

impl Model {
    pub fn new(kind: ModelKind, net: NetConfig, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let parts = match kind {
            ModelKind::Fused(f) => {
                let encoder = EchoEncoder::new(&mut b, &net)?;
                let decoder = EchoDecoder::new(&mut b, &net);
                let visual = VisualNet::new(&mut b, &net);
                let material = MaterialNet::new(&mut b, &net);
                let attention = AttentionNet::new(&mut b, &net, 2 * net.fusion_channels)?;
                let fusion = Fusion::new(&mut b, &net, f);
                Parts::Fused {
                    encoder,
                    decoder,
                    visual,
                    material,
                    attention,
                    fusion,
                }
            }
            ModelKind::Subset(m) if m == Modalities::ECHO => Parts::EchoOnly {
                encoder: EchoEncoder::new(&mut b, &net)?,
                decoder: EchoDecoder::new(&mut b, &net),
            },
            ModelKind::Subset(m) if m == Modalities::IMG => Parts::ImageOnly {
                visual: VisualNet::new(&mut b, &net),
            },
            ModelKind::Subset(m) => {
                if !(m.echo || m.img || m.mat) {
                    return Err(Error::Config("at least one modality is required".into()));
                }
                let encoder = m.echo.then(|| EchoEncoder::new(&mut b, &net)).transpose()?;
                let visual = m.img.then(|| VisualNet::new(&mut b, &net));
                let material = m.mat.then(|| MaterialNet::new(&mut b, &net));
                let cin = net.feature_dim * (m.echo as usize + m.img as usize + m.mat as usize);
                let stages = (net.image_size / net.bottleneck()).trailing_zeros() as usize;
                let decoder = UpStack::new(&mut b, "concat_decoder", &net, cin, stages, Activation::Relu);
                Parts::Concat {
                    encoder,
                    visual,
                    material,
                    decoder,
                }
            }
            ModelKind::Oracle => Parts::Oracle,
        };
        Ok(Model {
            kind,
            net,
            store,
            parts,
        })
    }

    pub fn weight_count(&self) -> usize {
        self.store.weight_count()
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<ModelOutput> {
        let side = self.net.bottleneck();
        let plain = |depth| ModelOutput {
            depth,
            alpha: None,
            echo_depth: None,
            image_depth: None,
        };
        match &self.parts {
            Parts::Fused {
                encoder,
                decoder,
                visual,
                material,
                attention,
                fusion,
            } => {
                let spec = ctx.g.input(batch.spec.clone());
                let img = ctx.g.input(batch.image.clone());
                let fe = encoder.forward(ctx, spec)?;
                let de = decoder.forward(ctx, fe)?;
                let vis = visual.forward(ctx, img)?;
                let fm = material.forward(ctx, img, (side, side))?;
                let fstar = fusion.forward(ctx, fe, vis.features, fm)?;
                let alpha = attention.forward(ctx, fstar)?;
                let depth = combine_depth(ctx, alpha, de, vis.depth)?;
                Ok(ModelOutput {
                    depth,
                    alpha: Some(alpha),
                    echo_depth: Some(de),
                    image_depth: Some(vis.depth),
                })
            }
            Parts::EchoOnly { encoder, decoder } => {
                let spec = ctx.g.input(batch.spec.clone());
                let fe = encoder.forward(ctx, spec)?;
                Ok(plain(decoder.forward(ctx, fe)?))
            }
            Parts::ImageOnly { visual } => {
                let img = ctx.g.input(batch.image.clone());
                Ok(plain(visual.forward(ctx, img)?.depth))
            }
            Parts::Concat {
                encoder,
                visual,
                material,
                decoder,
            } => {
                let mut feats = Vec::new();
                if let Some(enc) = encoder {
                    let spec = ctx.g.input(batch.spec.clone());
                    let fe = enc.forward(ctx, spec)?;
                    feats.push(ctx.g.broadcast_spatial(fe, side, side)?);
                }
                let img = ctx.g.input(batch.image.clone());
                if let Some(vis) = visual {
                    feats.push(vis.forward(ctx, img)?.features);
                }
                if let Some(mat) = material {
                    feats.push(mat.forward(ctx, img, (side, side))?);
                }
                let x = if feats.len() == 1 { feats[0] } else { ctx.g.concat(&feats)? };
                Ok(plain(decoder.forward(ctx, x)?))
            }
            Parts::Oracle => Ok(plain(ctx.g.input(batch.depth.clone()))),
        }
    }

    pub fn loss(&self, ctx: &mut Ctx, out: &ModelOutput, batch: &Batch) -> Result<Var> {
        log_l1_loss(ctx, out.depth, &batch.depth, &batch.mask)
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        match &self.parts {
            Parts::Fused { fusion, .. } => Some(fusion),
            _ => None,
        }
    }

    pub fn has_attention(&self) -> bool {
        matches!(self.parts, Parts::Fused { .. })
    }

    /// Model kind and network config as `key=value` metadata.
    pub fn config_kv(&self) -> KvList {
        let mut kv = self.kind.to_kv();
        kv.extend(&self.net.to_kv());
        kv
    }

    /// Rebuilds the architecture described by [`Model::config_kv`] with freshly
    /// initialized weights.
    pub fn from_config_kv(map: &KvMap) -> Result<Self> {
        let kind = ModelKind::from_kv(map)?;
        let net = NetConfig::from_kv(map)?;
        Model::new(kind, net, 0)
    }
}
