use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One example's model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Input {
    /// Token ids, fed to the model one-hot encoded.
    Tokens(Vec<usize>),
    Features(Vec<f64>),
}

impl Input {
    /// Bit-level identity key, used for disjointness checks.
    pub fn identity_key(&self) -> Vec<u64> {
        match self {
            Input::Features(x) => x.iter().map(|v| v.to_bits()).collect(),
            Input::Tokens(t) => t.iter().map(|&v| v as u64).collect(),
        }
    }
}

/// Declared input of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    Features { dim: usize },
    /// Each position becomes a token one-hot followed by a position one-hot.
    Tokens { vocab: usize, seq_len: usize },
}

impl InputSpec {
    /// Width of one encoded row.
    pub fn width(self) -> usize {
        match self {
            InputSpec::Features { dim } => dim,
            InputSpec::Tokens { vocab, seq_len } => vocab + seq_len,
        }
    }
}

/// Low-rank factors of one adapted layer, recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVar {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Adapter factors bound to a tape, keyed by target layer name.
#[derive(Debug, Clone, Default)]
pub struct AdapterVars {
    pub entries: BTreeMap<String, AdapterVar>,
}

/// Anything that can place low-rank deltas on a tape.
pub trait BindAdapters {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    /// `d_out x d_in`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub frozen: bool,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let name = name.into();
        let (d_out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(NnError::Config(format!(
                    "{name}: bias shape {:?} does not match {d_out} outputs",
                    b.shape()
                )));
            }
        }
        Ok(Self {
            name,
            weight,
            bias,
            frozen: true,
        })
    }

    /// Uniform init in `[-gain/sqrt(d_in), gain/sqrt(d_in)]` for weights and bias.
    pub fn random<R: Rng>(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (d_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let weight = Tensor::new(vec![d_out, d_in], draw(d_out * d_in)).expect("positive dims");
        let bias = bias.then(|| Tensor::new(vec![d_out], draw(d_out)).expect("positive dims"));
        Self {
            name: name.into(),
            weight,
            bias,
            frozen: true,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Parameters an optimizer may touch: none while frozen.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        if self.frozen {
            return Vec::new();
        }
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    fn bind(&self, tape: &mut Tape) -> BoundLinear {
        let wt = self.weight.transpose().expect("weight is a matrix");
        BoundLinear {
            weight_t: tape.constant(wt),
            bias: self.bias.as_ref().map(|b| tape.constant(b.detached())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    weight_t: Var,
    bias: Option<Var>,
}

impl BoundLinear {
    /// `x W0^T + s (x A^T) B^T + bias`; the merged weight is never formed.
    fn apply(&self, tape: &mut Tape, x: Var, adapter: Option<&AdapterVar>) -> Result<Var> {
        let mut y = tape.matmul(x, self.weight_t)?;
        if let Some(ad) = adapter {
            let at = tape.transpose(ad.a)?;
            let bt = tape.transpose(ad.b)?;
            let xa = tape.matmul(x, at)?;
            let d = tape.matmul(xa, bt)?;
            let d = tape.scale(d, ad.scale)?;
            y = tape.add(y, d)?;
        }
        if let Some(b) = self.bias {
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Multi-head self-attention with named Q/K/V/O projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub o: LinearLayer,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(q: LinearLayer, k: LinearLayer, v: LinearLayer, o: LinearLayer, heads: usize) -> Result<Self> {
        let d = q.d_in();
        for p in [&q, &k, &v, &o] {
            if p.d_in() != d || p.d_out() != d {
                return Err(NnError::Config(format!(
                    "{}: attention projections must be {d} x {d}",
                    p.name
                )));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NnError::Config(format!("{heads} heads do not divide model dimension {d}")));
        }
        Ok(Self { q, k, v, o, heads })
    }

    /// Projections named `<prefix>.q`, `<prefix>.k`, `<prefix>.v`, `<prefix>.o`.
    pub fn random<R: Rng>(prefix: &str, dim: usize, heads: usize, gain: f64, rng: &mut R) -> Result<Self> {
        let mut proj = |s: &str| LinearLayer::random(format!("{prefix}.{s}"), dim, dim, true, gain, rng);
        let (q, k, v, o) = (proj("q"), proj("k"), proj("v"), proj("o"));
        Self::new(q, k, v, o, heads)
    }

    pub fn dim(&self) -> usize {
        self.q.d_in()
    }

    fn projections(&self) -> [&LinearLayer; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var, adapters: Option<&AdapterVars>) -> Result<Var> {
        let lin = |tape: &mut Tape, l: &LinearLayer, x: Var| bound.linear(tape, &l.name, x, adapters);
        let q = lin(tape, &self.q, x)?;
        let k = lin(tape, &self.k, x)?;
        let v = lin(tape, &self.v, x)?;
        let dh = self.dim() / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let weights = tape.softmax(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        lin(tape, &self.o, joined)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Attention(Box<AttentionBlock>),
    Relu,
    Tanh,
    /// Averages over sequence positions, leaving one row.
    MeanPool,
}

/// A frozen base network: input encoding, hidden layers and a task head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input: InputSpec,
    pub layers: Vec<Layer>,
    pub head: LinearLayer,
}

struct BoundModel {
    linears: BTreeMap<String, BoundLinear>,
}

impl BoundModel {
    fn linear(&self, tape: &mut Tape, name: &str, x: Var, adapters: Option<&AdapterVars>) -> Result<Var> {
        let ad = adapters.and_then(|a| a.entries.get(name));
        self.linears[name].apply(tape, x, ad)
    }
}

impl Model {
    pub fn new(input: InputSpec, layers: Vec<Layer>, head: LinearLayer) -> Result<Self> {
        let model = Self { input, layers, head };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let mut dim = self.input.width();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    if l.d_in() != dim {
                        return Err(NnError::Config(format!("{}: expects {} inputs, got {dim}", l.name, l.d_in())));
                    }
                    dim = l.d_out();
                }
                Layer::Attention(a) => {
                    if a.dim() != dim {
                        return Err(NnError::Config(format!(
                            "attention block of width {} after a {dim}-wide layer",
                            a.dim()
                        )));
                    }
                }
                Layer::Relu | Layer::Tanh | Layer::MeanPool => {}
            }
        }
        if self.head.d_in() != dim {
            return Err(NnError::Config(format!(
                "{}: expects {} inputs, got {dim}",
                self.head.name,
                self.head.d_in()
            )));
        }
        let mut seen = HashSet::new();
        for l in self.linear_layers() {
            if !seen.insert(l.name.as_str()) {
                return Err(NnError::Config(format!("duplicate layer name {:?}", l.name)));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.head.d_out()
    }

    /// Every linear layer in forward order, attention projections and head included.
    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.push(l),
                Layer::Attention(a) => out.extend(a.projections()),
                _ => {}
            }
        }
        out.push(&self.head);
        out
    }

    pub fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.push(l),
                Layer::Attention(a) => out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]),
                _ => {}
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn find_linear(&self, name: &str) -> Option<&LinearLayer> {
        self.linear_layers().into_iter().find(|l| l.name == name)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    /// Row-wise models can process a whole batch as one matrix.
    fn mixes_rows(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Attention(_) | Layer::MeanPool))
    }

    fn check_binding(&self, adapters: &AdapterVars, tape: &Tape) -> Result<()> {
        for (name, ad) in &adapters.entries {
            let layer = self
                .find_linear(name)
                .ok_or_else(|| NnError::Binding(format!("adapter targets unknown layer {name:?}")))?;
            let (a, b) = (tape.value(ad.a).shape(), tape.value(ad.b).shape());
            let ok = a.len() == 2 && b.len() == 2 && a[1] == layer.d_in() && b[0] == layer.d_out() && a[0] == b[1];
            if !ok {
                return Err(NnError::Binding(format!(
                    "adapter for {name:?} has factors {a:?} and {b:?}, layer is {} x {}",
                    layer.d_out(),
                    layer.d_in()
                )));
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        let linears = self
            .linear_layers()
            .into_iter()
            .map(|l| (l.name.clone(), l.bind(tape)))
            .collect();
        BoundModel { linears }
    }

    /// Encodes one example as the matrix fed to the first layer.
    pub fn encode(&self, input: &Input) -> Result<Tensor> {
        match (self.input, input) {
            (InputSpec::Features { dim }, Input::Features(x)) if x.len() == dim => {
                Ok(Tensor::new(vec![1, dim], x.clone())?)
            }
            (InputSpec::Tokens { vocab, seq_len }, Input::Tokens(t)) if t.len() == seq_len => {
                let width = vocab + seq_len;
                let mut m = Tensor::zeros(&[seq_len, width]);
                for (i, &tok) in t.iter().enumerate() {
                    if tok >= vocab {
                        return Err(NnError::Input(format!("token {tok} outside vocabulary of {vocab}")));
                    }
                    m.data_mut()[i * width + tok] = 1.0;
                    m.data_mut()[i * width + vocab + i] = 1.0;
                }
                Ok(m)
            }
            (spec, input) => Err(NnError::Input(format!("input {input:?} does not match {spec:?}"))),
        }
    }

    fn forward_bound(&self, tape: &mut Tape, bound: &BoundModel, x: Var, adapters: Option<&AdapterVars>) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => bound.linear(tape, &l.name, h, adapters)?,
                Layer::Attention(a) => a.forward(tape, bound, h, adapters)?,
                Layer::Relu => tape.relu(h)?,
                Layer::Tanh => tape.tanh(h)?,
                Layer::MeanPool => tape.mean_rows(h)?,
            };
        }
        bound.linear(tape, &self.head.name, h, adapters)
    }

    /// Forward pass over a batch of examples, one output row per example.
    pub fn forward_batch(&self, tape: &mut Tape, inputs: &[Input], adapters: Option<&AdapterVars>) -> Result<Var> {
        if inputs.is_empty() {
            return Err(NnError::Input("empty batch".into()));
        }
        if let Some(a) = adapters {
            self.check_binding(a, tape)?;
        }
        let bound = self.bind(tape);
        if self.mixes_rows() {
            let mut rows = Vec::with_capacity(inputs.len());
            for input in inputs {
                let x = tape.constant(self.encode(input)?);
                rows.push(self.forward_bound(tape, &bound, x, adapters)?);
            }
            Ok(tape.concat_rows(&rows)?)
        } else {
            let mut data = Vec::new();
            for input in inputs {
                data.extend(self.encode(input)?.into_data());
            }
            let width = data.len() / inputs.len();
            let x = tape.constant(Tensor::new(vec![inputs.len(), width], data)?);
            self.forward_bound(tape, &bound, x, adapters)
        }
    }

    /// Forward pass on a raw input matrix (a vector is read as one row).
    ///
    /// Sequence models read the rows as positions of a single example.
    pub fn forward(&self, x: &Tensor, adapters: Option<&dyn BindAdapters>) -> Result<Tensor> {
        let x = match x.rank() {
            1 => x.reshape(vec![1, x.numel()])?,
            _ => x.detached(),
        };
        let mut tape = Tape::new();
        let vars = adapters.map(|a| a.bind(&mut tape, false));
        if let Some(v) = &vars {
            self.check_binding(v, &tape)?;
        }
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward_bound(&mut tape, &bound, xv, vars.as_ref())?;
        Ok(tape.value(out).detached())
    }

    /// Named parameter tensors in a stable order (`<layer>.weight`, `<layer>.bias`).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in self.linear_layers() {
            out.push((format!("{}.weight", l.name), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{}.bias", l.name), b));
            }
        }
        out
    }

    /// Overwrites parameters from named records; every parameter must be present.
    pub fn load_params(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for l in self.linear_layers_mut() {
            let mut slots = vec![(format!("{}.weight", l.name), &mut l.weight)];
            if let Some(b) = &mut l.bias {
                slots.push((format!("{}.bias", l.name), b));
            }
            for (key, slot) in slots {
                let t = by_name
                    .get(key.as_str())
                    .ok_or_else(|| NnError::Format(format!("missing parameter {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(NnError::Format(format!(
                        "{key}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.detached();
            }
        }
        Ok(())
    }
}
