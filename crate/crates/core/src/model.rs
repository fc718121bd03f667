//! Model zoo: feed-forward trunks with one or two heads, flat parameter
//! vectors for upload/aggregation, and the `FHCK` checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{FedHelpError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Architecture of the shared feature extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrunkSpec {
    /// Dense layers with ReLU after each.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// Same-padded square convolutions with ReLU after each; input is NHWC.
    Conv {
        in_channels: usize,
        channels: Vec<usize>,
        kernel: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub trunk: TrunkSpec,
    pub classes: usize,
    /// Class count of the auxiliary public-data head, if any.
    #[serde(default)]
    pub public_classes: Option<usize>,
}

impl ModelSpec {
    /// MLP from a width chain `[input, hidden..., classes]`.
    pub fn mlp(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least input and class widths");
        ModelSpec {
            trunk: TrunkSpec::Mlp {
                input_dim: widths[0],
                hidden: widths[1..widths.len() - 1].to_vec(),
            },
            classes: widths[widths.len() - 1],
            public_classes: None,
        }
    }

    /// Two hidden layers of width 64.
    pub fn default_small(input_dim: usize, classes: usize) -> Self {
        Self::mlp(&[input_dim, 64, 64, classes])
    }

    /// Four hidden layers of width 256.
    pub fn default_large(input_dim: usize, classes: usize) -> Self {
        Self::mlp(&[input_dim, 256, 256, 256, 256, classes])
    }

    /// Two 3×3 convolutions with 8 channels and a per-pixel 2-class head.
    pub fn default_segmentation(in_channels: usize) -> Self {
        ModelSpec {
            trunk: TrunkSpec::Conv {
                in_channels,
                channels: vec![8, 8],
                kernel: 3,
            },
            classes: 2,
            public_classes: None,
        }
    }

    pub fn with_public_head(mut self, classes: usize) -> Self {
        self.public_classes = Some(classes);
        self
    }

    pub fn without_public_head(mut self) -> Self {
        self.public_classes = None;
        self
    }

    pub fn feature_dim(&self) -> usize {
        match &self.trunk {
            TrunkSpec::Mlp { input_dim, hidden } => *hidden.last().unwrap_or(input_dim),
            TrunkSpec::Conv {
                in_channels,
                channels,
                ..
            } => *channels.last().unwrap_or(in_channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (input, widths) = match &self.trunk {
            TrunkSpec::Mlp { input_dim, hidden } => (*input_dim, hidden),
            TrunkSpec::Conv {
                in_channels,
                channels,
                kernel,
            } => {
                if kernel % 2 == 0 || *kernel == 0 {
                    return Err(FedHelpError::Spec(format!(
                        "kernel size must be odd, got {kernel}"
                    )));
                }
                (*in_channels, channels)
            }
        };
        if input == 0 || widths.contains(&0) {
            return Err(FedHelpError::Spec("zero-width layer".into()));
        }
        if self.classes == 0 || self.public_classes == Some(0) {
            return Err(FedHelpError::Spec("head with zero classes".into()));
        }
        Ok(())
    }

    /// Parameter count of trunk plus private head (the uploaded part).
    pub fn upload_param_count(&self) -> usize {
        Network::build(&self.clone().without_public_head(), 0)
            .map(|n| n.flatten_params().values.len())
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Dense,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    kind: LayerKind,
    layers: Vec<Layer>,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Linear map over the last axis; applied per pixel for segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }
}

/// A trunk with a private-task head and an optional public-task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    trunk: FeatureExtractor,
    head: Head,
    public_head: Option<Head>,
}

/// Small client model: shared trunk, private head, public head.
pub type SurrogateModel = Network;

/// Large client: a big local model that never leaves the client, plus a
/// proxy with the shared small architecture that is uploaded.
#[derive(Clone, Debug, PartialEq)]
pub struct LargeClientPair {
    pub large: Network,
    pub proxy: Network,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    trunk: Vec<(Var, Var)>,
    head: (Var, Var),
    public_head: Option<(Var, Var)>,
    kind: LayerKind,
}

impl Bound {
    /// Handles in the same order as [`Network::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.trunk.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.head.0, self.head.1]);
        if let Some((w, b)) = self.public_head {
            v.extend([w, b]);
        }
        v
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|x| *x = rng.random_range(-bound..bound));
    t.with_grad()
}

fn head(rng: &mut Rng, features: usize, classes: usize) -> Head {
    Head {
        weight: uniform(rng, &[features, classes], (1.0 / features as f64).sqrt()),
        bias: Tensor::zeros(&[classes]).with_grad(),
    }
}

impl Network {
    /// Initializes parameters with fan-in scaled uniform draws (Kaiming
    /// bound `sqrt(6/fan_in)` for ReLU layers, `sqrt(1/fan_in)` for heads)
    /// and zero biases. Identical `(spec, seed)` give identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::rng_from(seed, &[rng::stream::INIT]);
        let (kind, input_dim, widths, kernel) = match &spec.trunk {
            TrunkSpec::Mlp { input_dim, hidden } => (LayerKind::Dense, *input_dim, hidden, 1),
            TrunkSpec::Conv {
                in_channels,
                channels,
                kernel,
            } => (LayerKind::Conv, *in_channels, channels, *kernel),
        };
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan = input_dim;
        for &w in widths {
            let fan_in = fan * kernel * kernel;
            let shape = match kind {
                LayerKind::Dense => vec![fan, w],
                LayerKind::Conv => vec![kernel, kernel, fan, w],
            };
            layers.push(Layer {
                weight: uniform(&mut rng, &shape, (6.0 / fan_in as f64).sqrt()),
                bias: Tensor::zeros(&[w]).with_grad(),
            });
            fan = w;
        }
        let head_main = head(&mut rng, fan, spec.classes);
        let public_head = spec.public_classes.map(|c| head(&mut rng, fan, c));
        Ok(Network {
            spec: spec.clone(),
            trunk: FeatureExtractor {
                kind,
                layers,
                input_dim,
                output_dim: fan,
            },
            head: head_main,
            public_head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trunk(&self) -> &FeatureExtractor {
        &self.trunk
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn public_head(&self) -> Option<&Head> {
        self.public_head.as_ref()
    }

    pub fn is_segmentation(&self) -> bool {
        self.trunk.kind == LayerKind::Conv
    }

    /// All trainable tensors: trunk, private head, then public head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .trunk
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        v.extend([&self.head.weight, &self.head.bias]);
        if let Some(h) = &self.public_head {
            v.extend([&h.weight, &h.bias]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .trunk
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        if let Some(h) = &mut self.public_head {
            v.extend([&mut h.weight, &mut h.bias]);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter on the graph. `trainable = false` records
    /// them as constants (no gradient path).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut rec = |t: &Tensor| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.shape(), t.data().to_vec())
                    .expect("parameter shape is consistent")
            }
        };
        let trunk = self
            .trunk
            .layers
            .iter()
            .map(|l| (rec(&l.weight), rec(&l.bias)))
            .collect();
        let head = (rec(&self.head.weight), rec(&self.head.bias));
        let public_head = self
            .public_head
            .as_ref()
            .map(|h| (rec(&h.weight), rec(&h.bias)));
        Bound {
            trunk,
            head,
            public_head,
            kind: self.trunk.kind,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let ok = match self.trunk.kind {
            LayerKind::Dense => s.len() == 2 && s[1] == self.trunk.input_dim,
            LayerKind::Conv => {
                s.len() == 4 && s[3] == self.trunk.input_dim && s[1] <= 64 && s[2] <= 64
            }
        };
        if ok {
            Ok(())
        } else {
            let expect = match self.trunk.kind {
                LayerKind::Dense => vec![0, self.trunk.input_dim],
                LayerKind::Conv => vec![0, 64, 64, self.trunk.input_dim],
            };
            Err(FedHelpError::shape("model input", s, &expect))
        }
    }

    /// Trunk output: `[B×F]` for MLPs, `[B×H×W×F]` for conv nets.
    pub fn features(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for &(w, b) in &bound.trunk {
            let z = match bound.kind {
                LayerKind::Dense => g.matmul(h, w)?,
                LayerKind::Conv => g.conv2d(h, w)?,
            };
            let z = g.add_bias(z, b)?;
            h = g.relu(z);
        }
        Ok(h)
    }

    pub fn private_logits(&self, g: &mut Graph, bound: &Bound, features: Var) -> Result<Var> {
        apply_head(g, bound.head, features)
    }

    pub fn public_logits(&self, g: &mut Graph, bound: &Bound, features: Var) -> Result<Var> {
        let h = bound
            .public_head
            .ok_or_else(|| FedHelpError::Spec("model has no public head".into()))?;
        apply_head(g, h, features)
    }

    /// Raw private-head logits, `[B×C]` (or `[B×H×W×C]` for segmentation).
    pub fn forward_logits(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let f = self.features(g, bound, x)?;
        self.private_logits(g, bound, f)
    }

    /// Per-pixel logits for an NHWC image batch.
    pub fn forward_pixel_logits(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Var> {
        if !self.is_segmentation() {
            return Err(FedHelpError::Spec(
                "pixel logits need a convolutional trunk".into(),
            ));
        }
        self.forward_logits(g, bound, image)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.leaf(input);
        let out = self.forward_logits(&mut g, &bound, x)?;
        Ok(g.tensor(out))
    }

    pub fn predict_public(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.leaf(input);
        let f = self.features(&mut g, &bound, x)?;
        let out = self.public_logits(&mut g, &bound, f)?;
        Ok(g.tensor(out))
    }

    /// Gradients of every parameter (in [`Network::params`] order), zero
    /// for parameters the loss did not reach.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .vars()
            .into_iter()
            .zip(self.params())
            .map(|(v, t)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    fn layout_of(&self, with_public: bool) -> Layout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, t: &Tensor| {
            entries.push(LayoutEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        };
        for (i, l) in self.trunk.layers.iter().enumerate() {
            add(format!("trunk.{i}.weight"), &l.weight);
            add(format!("trunk.{i}.bias"), &l.bias);
        }
        add("head.weight".into(), &self.head.weight);
        add("head.bias".into(), &self.head.bias);
        if with_public {
            if let Some(h) = &self.public_head {
                add("public_head.weight".into(), &h.weight);
                add("public_head.bias".into(), &h.bias);
            }
        }
        Layout { entries }
    }

    fn flatten_with(&self, with_public: bool) -> ParamVector {
        let layout = self.layout_of(with_public);
        let keep = layout.entries.len();
        let values = self
            .params()
            .into_iter()
            .take(keep)
            .flat_map(|t| t.data().iter().copied())
            .collect();
        ParamVector { layout, values }
    }

    /// Trunk + private head, in fixed layer order. The public head is
    /// never part of an upload.
    pub fn flatten_params(&self) -> ParamVector {
        self.flatten_with(false)
    }

    /// Every parameter including the public head (checkpoint payload).
    pub fn flatten_all(&self) -> ParamVector {
        self.flatten_with(true)
    }

    /// Overwrites parameters from a vector produced by [`flatten_params`]
    /// or [`flatten_all`] on an identically specified model.
    ///
    /// [`flatten_params`]: Network::flatten_params
    /// [`flatten_all`]: Network::flatten_all
    pub fn load_params(&mut self, pv: &ParamVector) -> Result<()> {
        let with_public = pv.layout.entries.len() > self.layout_of(false).entries.len();
        let own = self.layout_of(with_public);
        if own != pv.layout {
            return Err(FedHelpError::Aggregation(
                "parameter layout does not match model".into(),
            ));
        }
        for (t, e) in self.params_mut().into_iter().zip(&own.entries) {
            let n = t.numel();
            t.data_mut()
                .copy_from_slice(&pv.values[e.offset..e.offset + n]);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.flatten_all().write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let pv = ParamVector::read_checkpoint(&mut f)?;
        self.load_params(&pv)
    }
}

fn apply_head(g: &mut Graph, (w, b): (Var, Var), features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let f = *shape.last().unwrap_or(&0);
    let rows = g.value(features).len() / f.max(1);
    let flat = if shape.len() == 2 {
        features
    } else {
        g.reshape(features, &[rows, f])?
    };
    let z = g.matmul(flat, w)?;
    let z = g.add_bias(z, b)?;
    if shape.len() == 2 {
        Ok(z)
    } else {
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty shape") = g.shape(b)[0];
        g.reshape(z, &out_shape)
    }
}

impl LargeClientPair {
    pub fn build(large: &ModelSpec, proxy: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(LargeClientPair {
            large: Network::build(&large.clone().without_public_head(), rng::derive_seed(seed, &[1]))?,
            proxy: Network::build(&proxy.clone().without_public_head(), rng::derive_seed(seed, &[2]))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.entries
            .last()
            .map_or(0, |e| e.offset + e.shape.iter().product::<usize>())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with its layout table; the unit of upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FHCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamVector {
    /// A vector with a single flat layout entry, for hand-built uploads.
    pub fn flat(values: Vec<f64>) -> Self {
        ParamVector {
            layout: Layout {
                entries: vec![LayoutEntry {
                    name: "flat".into(),
                    shape: vec![values.len()],
                    offset: 0,
                }],
            },
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bytes on the wire for one upload of this vector.
    pub fn upload_bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }

    /// `FHCK` · version u32 · layout-JSON length u32 · layout JSON · f64 LE payload.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let layout = serde_json::to_vec(&self.layout)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(layout.len() as u32).to_le_bytes())?;
        w.write_all(&layout)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| FedHelpError::format("checkpoint", "truncated header"))?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(FedHelpError::format("checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FedHelpError::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let json_len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)
            .map_err(|_| FedHelpError::format("checkpoint", "truncated layout"))?;
        let layout: Layout = serde_json::from_slice(&json)?;
        let mut values = vec![0.0; layout.len()];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| FedHelpError::format("checkpoint", "truncated payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(ParamVector { layout, values })
    }
}
