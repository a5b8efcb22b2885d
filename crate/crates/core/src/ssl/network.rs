//! Small convolutional backbone with a replaceable head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::seed;
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Embedding width of the full-scale ResNeXt models.
pub const FULL_SCALE_EMBED_DIM: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

/// 3×3 conv stages (zero padding 1, ReLU), global average pooling and a
/// linear embedding layer of width `embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub embed_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            input_size: 32,
            stages: vec![
                StageSpec {
                    channels: 16,
                    stride: 2,
                },
                StageSpec {
                    channels: 32,
                    stride: 2,
                },
                StageSpec {
                    channels: 32,
                    stride: 2,
                },
            ],
            embed_dim: 128,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.embed_dim == 0 || self.stages.is_empty() {
            return Err(TensorError::Invalid(
                "backbone needs a positive input size, embedding width and at least one stage"
                    .into(),
            ));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(TensorError::Invalid(
                "stage channels and strides must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Linear classifier; `zero_init` starts every logit at 0.
    Linear { classes: usize, zero_init: bool },
    /// Projection head `embed -> hidden -> ReLU -> bottleneck -> l2-normalize -> out`.
    Mlp {
        hidden: usize,
        bottleneck: usize,
        out: usize,
    },
}

impl HeadSpec {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadSpec::Linear { classes, .. } => *classes,
            HeadSpec::Mlp { out, .. } => *out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
}

#[derive(Clone, Debug)]
struct Ids {
    convs: Vec<(ParamId, ParamId)>,
    embed: (ParamId, ParamId),
    head: Vec<(ParamId, ParamId)>,
}

/// Architecture plus parameters. The parameter store can be swapped for any
/// store with the same layout (a teacher copy, an `f64` cast).
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: Architecture,
    pub params: ParamStore<f32>,
    ids: Ids,
}

fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-b..b) as f32)
}

fn add_head(
    params: &mut ParamStore<f32>,
    head: &HeadSpec,
    embed_dim: usize,
    seed: u64,
) -> Result<Vec<(ParamId, ParamId)>> {
    let mut rng = seed::rng(&[seed, seed::tag("head")]);
    let mut ids = Vec::new();
    match head {
        HeadSpec::Linear { classes, zero_init } => {
            if *classes == 0 {
                return Err(TensorError::Invalid(
                    "classifier head needs at least one class".into(),
                ));
            }
            let w = if *zero_init {
                Tensor::zeros(&[*classes, embed_dim])
            } else {
                uniform_init(&mut rng, &[*classes, embed_dim], embed_dim)
            };
            ids.push((
                params.insert("head.fc0.weight", w)?,
                params.insert("head.fc0.bias", Tensor::zeros(&[*classes]))?,
            ));
        }
        HeadSpec::Mlp {
            hidden,
            bottleneck,
            out,
        } => {
            if *hidden == 0 || *bottleneck == 0 || *out == 0 {
                return Err(TensorError::Invalid(
                    "projection head widths must be positive".into(),
                ));
            }
            ids.push((
                params.insert(
                    "head.fc0.weight",
                    kaiming(&mut rng, &[*hidden, embed_dim], embed_dim),
                )?,
                params.insert("head.fc0.bias", Tensor::zeros(&[*hidden]))?,
            ));
            ids.push((
                params.insert(
                    "head.fc1.weight",
                    uniform_init(&mut rng, &[*bottleneck, *hidden], *hidden),
                )?,
                params.insert("head.fc1.bias", Tensor::zeros(&[*bottleneck]))?,
            ));
            ids.push((
                params.insert(
                    "head.fc2.weight",
                    uniform_init(&mut rng, &[*out, *bottleneck], *bottleneck),
                )?,
                params.insert("head.fc2.bias", Tensor::zeros(&[*out]))?,
            ));
        }
    }
    Ok(ids)
}

impl Network {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.backbone.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(&[seed, seed::tag("backbone")]);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, st) in arch.backbone.stages.iter().enumerate() {
            let w = kaiming(&mut rng, &[st.channels, cin, 3, 3], cin * 9);
            convs.push((
                params.insert(format!("backbone.conv{i}.weight"), w)?,
                params.insert(
                    format!("backbone.conv{i}.bias"),
                    Tensor::zeros(&[st.channels]),
                )?,
            ));
            cin = st.channels;
        }
        let d = arch.backbone.embed_dim;
        let embed = (
            params.insert(
                "backbone.embed.weight",
                uniform_init(&mut rng, &[d, cin], cin),
            )?,
            params.insert("backbone.embed.bias", Tensor::zeros(&[d]))?,
        );
        let head = add_head(&mut params, &arch.head, d, seed)?;
        Ok(Network {
            arch,
            params,
            ids: Ids { convs, embed, head },
        })
    }

    /// Rebuilds a network around an existing parameter store (e.g. from a checkpoint).
    pub fn from_params(arch: Architecture, params: ParamStore<f32>) -> Result<Self> {
        let template = Network::new(arch.clone(), 0)?;
        template.params.check_compatible(&params)?;
        Ok(Network {
            arch,
            params,
            ids: template.ids,
        })
    }

    /// Same backbone weights with a freshly initialised `head`.
    pub fn with_new_head(&self, head: HeadSpec, seed: u64) -> Result<Self> {
        let arch = Architecture {
            backbone: self.arch.backbone.clone(),
            head,
        };
        let mut fresh = Network::new(arch, seed)?;
        for (id, name, _) in self.params.iter() {
            if name.starts_with("backbone.") {
                let dst = fresh.params.id(name)?;
                fresh
                    .params
                    .get_mut(dst)
                    .data_mut()
                    .copy_from_slice(self.params.get(id).data());
            }
        }
        Ok(fresh)
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.backbone.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.arch.head.out_dim()
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("backbone."))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for id in self.backbone_ids() {
            self.params.set_frozen(id, frozen);
        }
    }

    /// Embedding `[N, D]` of an `[N, 3, H, W]` input, using `params` (same layout as `self.params`).
    pub fn embed_var<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for ((w, b), st) in self.ids.convs.iter().zip(&self.arch.backbone.stages) {
            let wv = tape.param(params, *w);
            let bv = tape.param(params, *b);
            h = tape.conv2d(h, wv, Some(bv), st.stride, 1)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.global_avgpool(h)?;
        let w = tape.param(params, self.ids.embed.0);
        let b = tape.param(params, self.ids.embed.1);
        tape.linear(pooled, w, Some(b))
    }

    /// Head output for an embedding.
    pub fn head_var<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        emb: Var,
    ) -> Result<Var> {
        let mut h = emb;
        for (i, (w, b)) in self.ids.head.iter().enumerate() {
            let wv = tape.param(params, *w);
            let bv = tape.param(params, *b);
            h = tape.linear(h, wv, Some(bv))?;
            match (&self.arch.head, i) {
                (HeadSpec::Mlp { .. }, 0) => h = tape.relu(h)?,
                (HeadSpec::Mlp { .. }, 1) => h = tape.l2_normalize(h)?,
                _ => {}
            }
        }
        Ok(h)
    }

    pub fn forward_var<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let e = self.embed_var(tape, params, x)?;
        self.head_var(tape, params, e)
    }

    fn check_input(&self, images: &[Image]) -> Result<()> {
        let s = self.arch.backbone.input_size;
        if let Some(bad) = images.iter().find(|im| im.height() != s || im.width() != s) {
            return Err(TensorError::Shape {
                op: "embed",
                detail: format!(
                    "expected {s}x{s} inputs, got {}x{}",
                    bad.height(),
                    bad.width()
                ),
            });
        }
        Ok(())
    }

    fn batched(&self, images: &[Image], head: bool) -> Result<Tensor<f32>> {
        self.check_input(images)?;
        if images.is_empty() {
            return Err(TensorError::Invalid("no images".into()));
        }
        let width = if head {
            self.out_dim()
        } else {
            self.embed_dim()
        };
        let mut data = Vec::with_capacity(images.len() * width);
        for chunk in images.chunks(256) {
            let mut tape = Tape::no_grad();
            let x = tape.constant(&Image::batch(chunk));
            let out = if head {
                self.forward_var(&mut tape, &self.params, x)?
            } else {
                self.embed_var(&mut tape, &self.params, x)?
            };
            data.extend_from_slice(tape.data(out));
        }
        Tensor::new(vec![images.len(), width], data)
    }

    /// Embeddings `[N, D]` of preprocessed inputs; no gradient side effects.
    pub fn embed(&self, images: &[Image]) -> Result<Tensor<f32>> {
        self.batched(images, false)
    }

    /// Head outputs `[N, out_dim]`.
    pub fn logits(&self, images: &[Image]) -> Result<Tensor<f32>> {
        self.batched(images, true)
    }
}
