//! Image embeddings φ and initial node features.

use std::fmt;
use std::str::FromStr;

use graphshot_tensor::{ParamStore, Tensor, Var};
use rand::Rng;

use crate::episodes::EpisodeInput;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvBlock, Ctx, Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    /// Four `{conv 64, batchnorm, pool, leaky}` blocks and a 64-wide FC.
    Omniglot,
    /// Conv blocks of 64/96/128/256 filters (dropout 0.5 after the last
    /// two), then FC 128 with batchnorm.
    MiniImagenet,
    /// Flatten, FC 64, leaky-ReLU, FC 64. For inputs too small to survive
    /// four poolings, such as the synthetic data.
    Vector,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Omniglot => "omniglot",
            EmbeddingKind::MiniImagenet => "mini-imagenet",
            EmbeddingKind::Vector => "vector",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omniglot" => Ok(EmbeddingKind::Omniglot),
            "mini-imagenet" => Ok(EmbeddingKind::MiniImagenet),
            "vector" => Ok(EmbeddingKind::Vector),
            other => Err(Error::Config(format!("unknown embedding {other:?}"))),
        }
    }
}

pub const OMNIGLOT_WIDTH: usize = 64;
pub const MINI_IMAGENET_WIDTH: usize = 128;
pub const VECTOR_WIDTH: usize = 64;

#[derive(Clone, Debug)]
enum Body {
    Conv { blocks: Vec<ConvBlock>, fc: Linear, fc_norm: Option<BatchNorm> },
    Vector(Mlp),
}

/// The embedding network φ for images of a fixed `[c, h, w]` shape.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub kind: EmbeddingKind,
    input_shape: [usize; 3],
    out_width: usize,
    body: Body,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, kind: EmbeddingKind, input_shape: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        let [c, h, w] = input_shape;
        let conv_stack = |store: &mut ParamStore, filters: &[usize], dropout: &[Option<f64>], rng: &mut _| {
            let mut blocks = Vec::new();
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (i, (&f, &p)) in filters.iter().zip(dropout).enumerate() {
                if hh < 2 || ww < 2 {
                    return Err(Error::Shape(format!(
                        "{kind} embedding: {h}×{w} input is too small for {} poolings",
                        filters.len()
                    )));
                }
                blocks.push(ConvBlock::new(store, &format!("embed.block{i}"), ch, f, p, rng));
                (ch, hh, ww) = (f, hh / 2, ww / 2);
            }
            Ok((blocks, ch * hh * ww))
        };
        let (body, out_width) = match kind {
            EmbeddingKind::Omniglot => {
                if c != 1 {
                    return Err(Error::Shape(format!("omniglot embedding expects 1 channel, got {c}")));
                }
                let (blocks, flat) = conv_stack(store, &[64; 4], &[None; 4], rng)?;
                let fc = Linear::new(store, "embed.fc", flat, OMNIGLOT_WIDTH, true, rng);
                (Body::Conv { blocks, fc, fc_norm: None }, OMNIGLOT_WIDTH)
            }
            EmbeddingKind::MiniImagenet => {
                if c != 3 {
                    return Err(Error::Shape(format!("mini-imagenet embedding expects 3 channels, got {c}")));
                }
                let (blocks, flat) =
                    conv_stack(store, &[64, 96, 128, 256], &[None, None, Some(0.5), Some(0.5)], rng)?;
                let fc = Linear::new(store, "embed.fc", flat, MINI_IMAGENET_WIDTH, false, rng);
                let fc_norm = Some(BatchNorm::new(store, "embed.fc_bn", MINI_IMAGENET_WIDTH));
                (Body::Conv { blocks, fc, fc_norm }, MINI_IMAGENET_WIDTH)
            }
            EmbeddingKind::Vector => {
                let mlp = Mlp::new(store, "embed.mlp", &[c * h * w, VECTOR_WIDTH, VECTOR_WIDTH], rng);
                (Body::Vector(mlp), VECTOR_WIDTH)
            }
        };
        Ok(Self { kind, input_shape, out_width, body })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// `[b, c, h, w] → [b, out_width]`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let shape = ctx.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::Shape(format!(
                "{} embedding expects [b, {:?}], got {shape:?}",
                self.kind, self.input_shape
            )));
        }
        let b = shape[0];
        match &self.body {
            Body::Conv { blocks, fc, fc_norm } => {
                let mut h = images;
                for block in blocks {
                    h = block.forward(ctx, h)?;
                }
                let flat = ctx.tape.shape(h)[1..].iter().product();
                let h = ctx.tape.reshape(h, &[b, flat])?;
                let h = fc.forward(ctx, h)?;
                match fc_norm {
                    Some(bn) => bn.forward(ctx, h),
                    None => Ok(h),
                }
            }
            Body::Vector(mlp) => {
                let flat = ctx.tape.reshape(images, &[b, self.input_shape.iter().product()])?;
                mlp.forward(ctx, flat)
            }
        }
    }
}

/// Label field `h(l)` of one node: one-hot for an observed label, uniform
/// `1/K` otherwise. Labels are 0-based; label `l` sets coordinate `l`.
pub fn label_field(label: Option<usize>, way: usize) -> Vec<f64> {
    match label {
        Some(l) => (0..way).map(|k| if k == l { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0 / way as f64; way],
    }
}

/// Stacked label fields `[n, way]` in node order.
pub fn label_fields(node_labels: &[Option<usize>], way: usize) -> Tensor {
    let data = node_labels.iter().flat_map(|&l| label_field(l, way)).collect();
    Tensor::new(&[node_labels.len(), way], data).expect("label field layout")
}

/// `x⁽⁰⁾ = [φ(image), h(label)]` for every node.
pub fn init_nodes(ctx: &mut Ctx, embedding: &Embedding, input: &EpisodeInput) -> Result<Var> {
    let images = ctx.tape.constant(input.images.clone());
    let emb = embedding.forward(ctx, images)?;
    init_nodes_from(ctx, emb, input)
}

/// Same as [`init_nodes`] for precomputed embeddings.
pub fn init_nodes_from(ctx: &mut Ctx, emb: Var, input: &EpisodeInput) -> Result<Var> {
    let fields = ctx.tape.constant(label_fields(&input.node_labels, input.way));
    Ok(ctx.tape.concat_cols(&[emb, fields])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use graphshot_tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(&[n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn embed(e: &Embedding, store: &ParamStore, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, mode, ChaCha8Rng::seed_from_u64(seed));
        let v = ctx.tape.constant(x.clone());
        let y = e.forward(&mut ctx, v)?;
        Ok(ctx.tape.value(y).clone())
    }

    #[test]
    fn omniglot_shape_and_eval_determinism() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, EmbeddingKind::Omniglot, [1, 28, 28], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let x = images(26, [1, 28, 28], 1);
        let y = embed(&e, &store, &x, Mode::Train, 0).unwrap();
        assert_eq!(y.shape(), &[26, 64]);

        let one = images(1, [1, 28, 28], 2);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let pair = Tensor::new(&[2, 1, 28, 28], twice).unwrap();
        let y = embed(&e, &store, &pair, Mode::Eval, 0).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, EmbeddingKind::Omniglot, [1, 28, 28], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(matches!(embed(&e, &store, &images(2, [1, 27, 28], 0), Mode::Eval, 0), Err(Error::Shape(_))));
        let mut store = ParamStore::new();
        let too_small = Embedding::new(&mut store, EmbeddingKind::Omniglot, [1, 14, 14], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(too_small, Err(Error::Shape(_))));
    }

    #[test]
    fn mini_imagenet_shape_and_dropout() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, EmbeddingKind::MiniImagenet, [3, 84, 84], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let x = images(26, [3, 84, 84], 3);
        let a = embed(&e, &store, &x, Mode::Train, 5).unwrap();
        assert_eq!(a.shape(), &[26, 128]);
        assert_eq!(a, embed(&e, &store, &x, Mode::Train, 5).unwrap());
        assert_ne!(a, embed(&e, &store, &x, Mode::Train, 6).unwrap());
        assert_eq!(embed(&e, &store, &x, Mode::Eval, 1).unwrap(), embed(&e, &store, &x, Mode::Eval, 2).unwrap());
        assert!(matches!(embed(&e, &store, &images(2, [1, 84, 84], 0), Mode::Eval, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn label_fields_on_the_simplex() {
        // Label 3 in 1-based numbering is index 2.
        assert_eq!(label_field(Some(2), 5), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(label_field(None, 5), vec![0.2; 5]);
        let t = label_fields(&[Some(0), None, Some(4), None], 7);
        for i in 0..4 {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn node_width_is_embedding_plus_way() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, EmbeddingKind::Vector, [1, 8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let input = EpisodeInput::new(
            images(6, [1, 8, 8], 0),
            5,
            vec![Some(0), Some(1), Some(2), Some(3), Some(4), None],
            vec![],
            1,
        )
        .unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let x0 = init_nodes(&mut ctx, &e, &input).unwrap();
        assert_eq!(ctx.tape.shape(x0), &[6, 69]);
        assert_eq!(&ctx.tape.value(x0).row(5)[64..], &[0.2; 5]);
    }
}
