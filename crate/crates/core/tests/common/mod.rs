#![allow(dead_code)]

use egoscale::seed;
use egoscale::tensor::{
    Differentiable, GradCheckConfig, OpKind, ParamStore, Result, Scalar, Tape, Target, Tensor, Var,
};
use rand::Rng;

/// Step for central differences; small enough that relu and max-pool kinks
/// are almost never straddled.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const RANDOM_POINTS: u64 = 10;

pub fn gc_config() -> GradCheckConfig {
    GradCheckConfig {
        step: FD_STEP,
        tolerance: GRAD_TOL,
        max_coords_per_param: 256,
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = seed::rng(&[seed]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn lit<F: Scalar>(t: &Tensor<f32>) -> Tensor<F> {
    t.cast()
}

/// Single-op graphs; each loss is `sum(op(params) * R)` with a fixed random
/// readout `R` of the op's output shape.
#[derive(Clone, Debug)]
pub enum OpCase {
    Add,
    Mul,
    MatMul,
    Linear,
    Conv2d { stride: usize, pad: usize },
    AvgPool2d,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    LogSoftmax,
    Softmax,
    L2Normalize,
    CrossEntropyHard,
    CrossEntropySoft,
    Mean,
    Sum,
    Scale,
    Concat { axis: usize },
    BilinearResize { out: (usize, usize) },
    Reshape,
}

pub struct OpInstance {
    pub case: OpCase,
    pub params: ParamStore<f32>,
    weights: Tensor<f32>,
    soft: Tensor<f32>,
}

impl OpCase {
    pub fn all() -> Vec<OpCase> {
        vec![
            OpCase::Add,
            OpCase::Mul,
            OpCase::MatMul,
            OpCase::Linear,
            OpCase::Conv2d { stride: 1, pad: 1 },
            OpCase::Conv2d { stride: 2, pad: 1 },
            OpCase::Conv2d { stride: 1, pad: 0 },
            OpCase::AvgPool2d,
            OpCase::MaxPool2d,
            OpCase::GlobalAvgPool,
            OpCase::Relu,
            OpCase::LogSoftmax,
            OpCase::Softmax,
            OpCase::L2Normalize,
            OpCase::CrossEntropyHard,
            OpCase::CrossEntropySoft,
            OpCase::Mean,
            OpCase::Sum,
            OpCase::Scale,
            OpCase::Concat { axis: 0 },
            OpCase::Concat { axis: 1 },
            OpCase::BilinearResize { out: (8, 7) },
            OpCase::BilinearResize { out: (3, 3) },
            OpCase::Reshape,
        ]
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        use OpCase::*;
        match self {
            Add => vec![("a", vec![3, 4]), ("b", vec![4])],
            Mul => vec![("a", vec![3, 4]), ("b", vec![3, 4])],
            MatMul => vec![("a", vec![3, 5]), ("b", vec![5, 2])],
            Linear => vec![("x", vec![4, 5]), ("w", vec![3, 5]), ("b", vec![3])],
            Conv2d { .. } => vec![
                ("x", vec![2, 2, 6, 6]),
                ("w", vec![3, 2, 3, 3]),
                ("b", vec![3]),
            ],
            AvgPool2d | MaxPool2d => vec![("x", vec![1, 2, 6, 6])],
            GlobalAvgPool => vec![("x", vec![2, 3, 4, 4])],
            Relu | LogSoftmax | Softmax | L2Normalize | Mean | Sum | Scale => {
                vec![("x", vec![3, 5])]
            }
            CrossEntropyHard | CrossEntropySoft => vec![("x", vec![4, 5])],
            Concat { axis: 0 } => vec![("a", vec![2, 3]), ("b", vec![4, 3])],
            Concat { .. } => vec![("a", vec![2, 3]), ("b", vec![2, 4])],
            BilinearResize { .. } => vec![("x", vec![1, 2, 5, 5])],
            Reshape => vec![("x", vec![2, 6])],
        }
    }

    /// Parameters and the fixed readout weights at random point `point`.
    pub fn instance(&self, point: u64) -> OpInstance {
        let mut params = ParamStore::new();
        for (i, (name, shape)) in self.param_shapes().into_iter().enumerate() {
            params
                .insert(name, uniform(&shape, seed::hash(&[point, i as u64, 17])))
                .unwrap();
        }
        let out_shape = {
            let mut tape = Tape::<f32>::no_grad();
            let out = self.forward(&mut tape, &params).unwrap();
            tape.shape(out).to_vec()
        };
        let soft = {
            let raw = uniform(&[4, 5], seed::hash(&[point, 99]));
            let mut d: Vec<f32> = raw.data().iter().map(|v| (2.0 * v).exp()).collect();
            for row in d.chunks_mut(5) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(vec![4, 5], d).unwrap()
        };
        OpInstance {
            case: self.clone(),
            params,
            weights: uniform(&out_shape, seed::hash(&[point, 55])),
            soft,
        }
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamStore<F>) -> Result<Var> {
        self.forward_with(tape, params, None)
    }

    fn forward_with<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        soft: Option<&Tensor<f32>>,
    ) -> Result<Var> {
        use OpCase::*;
        let p: Vec<Var> = (0..params.len())
            .map(|i| tape.param(params, egoscale::tensor::ParamId(i)))
            .collect();
        match self {
            Add => tape.add(p[0], p[1]),
            Mul => tape.mul(p[0], p[1]),
            MatMul => tape.matmul(p[0], p[1]),
            Linear => tape.linear(p[0], p[1], Some(p[2])),
            Conv2d { stride, pad } => tape.conv2d(p[0], p[1], Some(p[2]), *stride, *pad),
            AvgPool2d => tape.avgpool2d(p[0], 2, 2),
            MaxPool2d => tape.maxpool2d(p[0], 2, 2),
            GlobalAvgPool => tape.global_avgpool(p[0]),
            Relu => tape.relu(p[0]),
            LogSoftmax => tape.log_softmax(p[0]),
            Softmax => tape.softmax(p[0]),
            L2Normalize => tape.l2_normalize(p[0]),
            CrossEntropyHard => tape.cross_entropy(p[0], Target::Classes(vec![0, 3, 1, 4])),
            CrossEntropySoft => {
                let s = soft.map_or_else(|| Tensor::full(&[4, 5], F::lit(0.2)), lit::<F>);
                tape.cross_entropy(p[0], Target::Soft(s))
            }
            Mean => tape.mean(p[0]),
            Sum => tape.sum(p[0]),
            Scale => tape.scale(p[0], F::lit(-0.7)),
            Concat { axis } => tape.concat(&[p[0], p[1]], *axis),
            BilinearResize { out } => tape.bilinear_resize(p[0], out.0, out.1),
            Reshape => tape.reshape(p[0], &[3, 4]),
        }
    }
}

impl Differentiable for OpInstance {
    fn loss<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamStore<F>) -> Result<Var> {
        let out = self.case.forward_with(tape, params, Some(&self.soft))?;
        let r = tape.constant(&lit::<F>(&self.weights));
        let weighted = tape.mul(out, r)?;
        tape.sum(weighted)
    }
}

/// Ops recorded by one forward pass of `case`, readout excluded.
pub fn ops_of(case: &OpCase) -> Vec<OpKind> {
    let inst = case.instance(0);
    let mut tape = Tape::<f32>::new();
    case.forward_with(&mut tape, &inst.params, Some(&inst.soft))
        .unwrap();
    tape.recorded_ops()
}

/// conv → relu → conv(stride 2) → relu → conv(stride 2) → relu → global
/// pool → linear → cross-entropy.
pub struct ConvNet3 {
    pub input: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ConvNet3 {
    pub fn new(point: u64) -> (Self, ParamStore<f32>) {
        let mut p = ParamStore::new();
        let shapes: [(&str, Vec<usize>, f32); 8] = [
            ("conv0.w", vec![4, 3, 3, 3], 0.4),
            ("conv0.b", vec![4], 0.1),
            ("conv1.w", vec![6, 4, 3, 3], 0.3),
            ("conv1.b", vec![6], 0.1),
            ("conv2.w", vec![8, 6, 3, 3], 0.25),
            ("conv2.b", vec![8], 0.1),
            ("fc.w", vec![5, 8], 0.5),
            ("fc.b", vec![5], 0.1),
        ];
        for (i, (name, shape, s)) in shapes.into_iter().enumerate() {
            let mut t = uniform(&shape, seed::hash(&[point, 1000 + i as u64]));
            t.data_mut().iter_mut().for_each(|v| *v *= s);
            p.insert(name, t).unwrap();
        }
        let net = ConvNet3 {
            input: uniform(&[2, 3, 8, 8], seed::hash(&[point, 7])),
            labels: vec![(point % 5) as usize, ((point + 2) % 5) as usize],
        };
        (net, p)
    }
}

impl Differentiable for ConvNet3 {
    fn loss<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamStore<F>) -> Result<Var> {
        let g = |tape: &mut Tape<F>, name: &str| tape.param(params, params.id(name).unwrap());
        let mut x = tape.constant(&lit::<F>(&self.input));
        for (i, stride) in [1usize, 2, 2].into_iter().enumerate() {
            let w = g(tape, &format!("conv{i}.w"));
            let b = g(tape, &format!("conv{i}.b"));
            x = tape.conv2d(x, w, Some(b), stride, 1)?;
            x = tape.relu(x)?;
        }
        let pooled = tape.global_avgpool(x)?;
        let w = g(tape, "fc.w");
        let b = g(tape, "fc.b");
        let logits = tape.linear(pooled, w, Some(b))?;
        tape.cross_entropy(logits, Target::Classes(self.labels.clone()))
    }
}

pub mod ssl {
    use egoscale::seed;
    use egoscale::ssl::{
        Architecture, BackboneSpec, DinoBatch, DinoConfig, HeadSpec, Network, StageSpec,
    };
    use egoscale::tensor::{OptimizerConfig, ParamStore, Tape, Tensor};
    use rand::Rng;

    pub const OUT: usize = 7;

    pub fn rand_tensor(shape: &[usize], s: u64) -> Tensor<f32> {
        let mut r = seed::rng(&[s, 3]);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0f32))
    }

    pub fn tiny_backbone() -> BackboneSpec {
        BackboneSpec {
            input_size: 8,
            stages: vec![StageSpec {
                channels: 4,
                stride: 2,
            }],
            embed_dim: 6,
        }
    }

    pub fn tiny_dino_net(seed: u64) -> Network {
        let arch = Architecture {
            backbone: tiny_backbone(),
            head: HeadSpec::Mlp {
                hidden: 5,
                bottleneck: 4,
                out: OUT,
            },
        };
        Network::new(arch, seed).unwrap()
    }

    pub fn tiny_dino_config(lr: f64) -> DinoConfig {
        DinoConfig {
            out_dim: OUT,
            hidden_dim: 5,
            bottleneck_dim: 4,
            optimizer: OptimizerConfig::adam(lr),
            ..DinoConfig::default()
        }
    }

    pub fn random_batch(b: usize, locals: usize, s: u64) -> DinoBatch {
        DinoBatch {
            globals: (0..2)
                .map(|i| rand_tensor(&[b, 3, 8, 8], s * 100 + i))
                .collect(),
            locals: (0..locals as u64)
                .map(|i| rand_tensor(&[b, 3, 4, 4], s * 100 + 50 + i))
                .collect(),
        }
    }

    /// Head outputs `[B, K]` of `net`'s architecture under `params`.
    pub fn head_outputs(net: &Network, params: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
        let mut t = Tape::no_grad();
        let v = t.constant(x);
        let o = net.forward_var(&mut t, params, v).unwrap();
        Tensor::new(t.shape(o).to_vec(), t.data(o).to_vec()).unwrap()
    }
}

/// Image-level checks shared by the property suites and the acceptance target.
/// Each returns the largest deviation found.
pub mod invariants {
    use egoscale::augment::{denormalize, grayscale, normalize, IMAGENET_MEAN, IMAGENET_STD};
    use egoscale::eval::{
        amplitude_spectrum, apply_distortion, power_equalize, DistortionContext, DistortionKind,
        DistortionSpec, Spectrum,
    };
    use egoscale::image::Image;
    use egoscale::seed;
    use rand::Rng;

    pub const IDENTITY_TOL: f32 = 1e-6;
    /// On the 1/(H·W) normalized DFT amplitude.
    pub const SPECTRUM_TOL: f64 = 1e-4;

    pub fn random_image(h: usize, w: usize, s: u64) -> Image {
        let mut rng = seed::rng(&[s, seed::tag("test-image")]);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect())
    }

    pub fn identity_distortion_errors(img: &Image, s: u64) -> Vec<(DistortionKind, f32)> {
        let ctx = DistortionContext::default();
        DistortionKind::ALL
            .iter()
            .filter_map(|&k| k.identity_param().map(|p| (k, p)))
            .map(|(k, p)| {
                let out =
                    apply_distortion(img, &DistortionSpec::new(k, p).unwrap(), &ctx, s).unwrap();
                (k, out.max_abs_diff(img))
            })
            .collect()
    }

    pub fn rotation4_error(img: &Image) -> f32 {
        let spec = DistortionSpec::new(DistortionKind::Rotation, 90.0).unwrap();
        let ctx = DistortionContext::default();
        let out = (0..4).fold(img.clone(), |im, i| {
            apply_distortion(&im, &spec, &ctx, i).unwrap()
        });
        out.max_abs_diff(img)
    }

    fn spectrum_gap(a: &Spectrum, b: &Spectrum) -> f64 {
        let n = (a.height * a.width) as f64;
        a.amplitude
            .iter()
            .zip(&b.amplitude)
            .map(|(x, y)| (x - y).abs() / n)
            .fold(0.0, f64::max)
    }

    pub fn phase_scramble_amplitude_error(img: &Image, weight: f64, s: u64) -> f64 {
        let spec = DistortionSpec::new(DistortionKind::PhaseScrambling, weight).unwrap();
        let out = apply_distortion(img, &spec, &DistortionContext::default(), s).unwrap();
        spectrum_gap(&amplitude_spectrum(img), &amplitude_spectrum(&out))
    }

    /// Gap between one and two applications against a fixed mean spectrum.
    pub fn power_equalization_idempotence_error(img: &Image, reference: &[Image]) -> f32 {
        let ctx = DistortionContext::from_images(reference).unwrap();
        let mean = ctx.mean_amplitude.as_ref().unwrap();
        let once = power_equalize(img, mean).unwrap();
        let twice = power_equalize(&once, mean).unwrap();
        twice.max_abs_diff(&once)
    }

    pub fn grayscale_idempotence_error(img: &Image) -> f32 {
        let g = grayscale(img);
        grayscale(&g).max_abs_diff(&g)
    }

    pub fn normalize_roundtrip_error(img: &Image) -> f32 {
        denormalize(
            &normalize(img, IMAGENET_MEAN, IMAGENET_STD),
            IMAGENET_MEAN,
            IMAGENET_STD,
        )
        .max_abs_diff(img)
    }

    pub fn flip_involution_error(img: &Image) -> f32 {
        img.flip_horizontal().flip_horizontal().max_abs_diff(img)
    }
}
