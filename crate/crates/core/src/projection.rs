//! Two-headed MLP mapping a fixed input embedding to a box.
//!
//! ```text
//! center = W2c · act(W1c · x + b1c) + b2c
//! offset = softplus(W2o · act(W1o · x + b1o) + b2o)
//! ```
//!
//! Parameters live in one flat `f64` buffer in declaration order
//! (`W1c, b1c, W2c, b2c, W1o, b1o, W2o, b2o`), which is also the checkpoint
//! layout and the layout of [`ParamGrads`]. `W1` is `k×h` and `W2` is `h×d`,
//! both row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::GaussBox;
use crate::taxonomy::NodeId;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GBXT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Offsets start near this value for inputs that leave the hidden layer idle.
pub const INITIAL_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation.
    Gelu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + gelu_inner(x).tanh()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = gelu_inner(x).tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}` (expected relu or gelu)"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus⁻¹(y) = ln(e^y - 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Start offsets of the eight parameter tensors.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1c: usize,
    b1c: usize,
    w2c: usize,
    b2c: usize,
    w1o: usize,
    b1o: usize,
    w2o: usize,
    b2o: usize,
    len: usize,
}

impl Dims {
    fn layout(self) -> Layout {
        let Dims {
            input: k,
            hidden: h,
            output: d,
        } = self;
        let head = k * h + h + h * d + d;
        Layout {
            w1c: 0,
            b1c: k * h,
            w2c: k * h + h,
            b2c: k * h + h + h * d,
            w1o: head,
            b1o: head + k * h,
            w2o: head + k * h + h,
            b2o: head + k * h + h + h * d,
            len: 2 * head,
        }
    }

    /// `2·(k·h + h + h·d + d)`.
    pub fn param_count(self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    dims: Dims,
    activation: Activation,
    dropout: f64,
    /// Hash of the training config that produced these weights.
    config_hash: [u8; 32],
    data: Vec<f64>,
    /// Bumped by every mutation; traces from older generations are stale.
    generation: u64,
}

/// Flat gradient buffer with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(dims: Dims) -> Self {
        ParamGrads(vec![0.0; dims.param_count()])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct HeadTrace {
    /// Hidden pre-activations.
    pre: Vec<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-ρ)); all ones without dropout.
    mask: Vec<f64>,
    /// Hidden activations after dropout.
    hidden: Vec<f64>,
}

/// Cached intermediates from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    center: HeadTrace,
    offset: HeadTrace,
    /// Offset-head outputs before softplus.
    offset_pre: Vec<f64>,
    generation: u64,
}

impl ForwardTrace {
    /// Dropout multipliers of the center and offset heads.
    pub fn dropout_masks(&self) -> (&[f64], &[f64]) {
        (&self.center.mask, &self.offset.mask)
    }
}

impl ProjectionParams {
    /// Glorot-uniform weights, zero biases, and the offset head's output bias
    /// at `softplus⁻¹(0.5)`.
    pub fn init(dims: Dims, activation: Activation, dropout: f64, rng_seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(Error::InvalidArgument(format!(
                "projection dims must be >= 1, got k={} h={} d={}",
                dims.input, dims.hidden, dims.output
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {dropout}"
            )));
        }
        let l = dims.layout();
        let mut data = vec![0.0; l.len];
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (k, h, d) = (dims.input, dims.hidden, dims.output);
        for (start, fan_in, fan_out) in [(l.w1c, k, h), (l.w2c, h, d), (l.w1o, k, h), (l.w2o, h, d)] {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut data[start..start + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let shift = inverse_softplus(INITIAL_OFFSET);
        data[l.b2o..l.b2o + d].iter_mut().for_each(|b| *b = shift);
        Ok(ProjectionParams {
            dims,
            activation,
            dropout,
            config_hash: [0; 32],
            data,
            generation: 0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn config_hash(&self) -> &[u8; 32] {
        &self.config_hash
    }

    pub fn set_config_hash(&mut self, hash: [u8; 32]) {
        self.config_hash = hash;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat parameters; invalidates outstanding traces.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::DimensionMismatch {
                expected: self.dims.input,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Hidden layer of one head; `mask` (if any) is applied after activation.
    fn hidden(&self, w1: usize, b1: usize, x: &[f64], mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let h = self.dims.hidden;
        let mut pre = self.data[b1..b1 + h].to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &self.data[w1 + i * h..w1 + (i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let act = self.activation;
        let hidden = match mask {
            Some(m) => pre.iter().zip(m).map(|(p, m)| act.apply(*p) * m).collect(),
            None => pre.iter().map(|p| act.apply(*p)).collect(),
        };
        (pre, hidden)
    }

    fn output(&self, w2: usize, b2: usize, hidden: &[f64]) -> Vec<f64> {
        let d = self.dims.output;
        let mut out = self.data[b2..b2 + d].to_vec();
        for (j, a) in hidden.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            let row = &self.data[w2 + j * d..w2 + (j + 1) * d];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        out
    }

    fn finish(center: Vec<f64>, offset_pre: &[f64]) -> Result<GaussBox> {
        let offset: Vec<f64> = offset_pre.iter().map(|u| softplus(*u)).collect();
        // softplus underflows to exactly 0 only for u < ~-745
        if center.iter().chain(&offset).any(|v| !v.is_finite()) || offset.iter().any(|o| *o <= 0.0) {
            return Err(Error::NonFinite {
                what: "projection output".into(),
                instance: String::new(),
            });
        }
        GaussBox::new(center, offset)
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn forward_eval(&self, x: &[f64]) -> Result<GaussBox> {
        self.check_input(x)?;
        let l = self.dims.layout();
        let (_, hc) = self.hidden(l.w1c, l.b1c, x, None);
        let (_, ho) = self.hidden(l.w1o, l.b1o, x, None);
        let center = self.output(l.w2c, l.b2c, &hc);
        let offset_pre = self.output(l.w2o, l.b2o, &ho);
        Self::finish(center, &offset_pre)
    }

    fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let h = self.dims.hidden;
        if self.dropout == 0.0 {
            return vec![1.0; h];
        }
        let keep = 1.0 / (1.0 - self.dropout);
        (0..h)
            .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
            .collect()
    }

    /// Training-mode forward pass: dropout masks are drawn from `rng` and the
    /// returned trace feeds [`backward`](Self::backward).
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<(GaussBox, ForwardTrace)> {
        let mc = self.sample_mask(rng);
        let mo = self.sample_mask(rng);
        self.forward_with_masks(x, mc, mo)
    }

    /// Training-mode forward pass with explicit dropout multipliers.
    pub fn forward_with_masks(
        &self,
        x: &[f64],
        center_mask: Vec<f64>,
        offset_mask: Vec<f64>,
    ) -> Result<(GaussBox, ForwardTrace)> {
        self.check_input(x)?;
        for m in [&center_mask, &offset_mask] {
            if m.len() != self.dims.hidden {
                return Err(Error::DimensionMismatch {
                    expected: self.dims.hidden,
                    actual: m.len(),
                });
            }
        }
        let l = self.dims.layout();
        let (pre_c, hc) = self.hidden(l.w1c, l.b1c, x, Some(&center_mask));
        let (pre_o, ho) = self.hidden(l.w1o, l.b1o, x, Some(&offset_mask));
        let center = self.output(l.w2c, l.b2c, &hc);
        let offset_pre = self.output(l.w2o, l.b2o, &ho);
        let b = Self::finish(center, &offset_pre)?;
        Ok((
            b,
            ForwardTrace {
                input: x.to_vec(),
                center: HeadTrace {
                    pre: pre_c,
                    mask: center_mask,
                    hidden: hc,
                },
                offset: HeadTrace {
                    pre: pre_o,
                    mask: offset_mask,
                    hidden: ho,
                },
                offset_pre,
                generation: self.generation,
            },
        ))
    }

    /// Dispatching forward pass; the trace is present only in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(GaussBox, Option<ForwardTrace>)> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(x)?, None)),
            Mode::Train => {
                let (b, t) = self.forward_train(x, rng)?;
                Ok((b, Some(t)))
            }
        }
    }

    /// Parameter gradients of an upstream scalar given its gradients with
    /// respect to the box center and offset.
    pub fn backward(
        &self,
        trace: Option<&ForwardTrace>,
        grad_center: &[f64],
        grad_offset: &[f64],
    ) -> Result<ParamGrads> {
        let mut out = ParamGrads::zeros(self.dims);
        self.backward_into(trace, grad_center, grad_offset, &mut out)?;
        Ok(out)
    }

    /// As [`backward`](Self::backward), accumulating into `out`.
    pub fn backward_into(
        &self,
        trace: Option<&ForwardTrace>,
        grad_center: &[f64],
        grad_offset: &[f64],
        out: &mut ParamGrads,
    ) -> Result<()> {
        let trace = trace.ok_or(Error::MissingTrace)?;
        if trace.generation != self.generation || trace.input.len() != self.dims.input {
            return Err(Error::MissingTrace);
        }
        let d = self.dims.output;
        for g in [grad_center, grad_offset] {
            if g.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: g.len(),
                });
            }
        }
        let l = self.dims.layout();
        self.head_backward(&trace.input, &trace.center, grad_center, l.w1c, l.b1c, l.w2c, l.b2c, out);
        let grad_u: Vec<f64> = grad_offset
            .iter()
            .zip(&trace.offset_pre)
            .map(|(g, u)| g * sigmoid(*u))
            .collect();
        self.head_backward(&trace.input, &trace.offset, &grad_u, l.w1o, l.b1o, l.w2o, l.b2o, out);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn head_backward(
        &self,
        x: &[f64],
        t: &HeadTrace,
        grad_out: &[f64],
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
        out: &mut ParamGrads,
    ) {
        let (h, d) = (self.dims.hidden, self.dims.output);
        let g = &mut out.0;
        for (m, go) in grad_out.iter().enumerate() {
            g[b2 + m] += go;
        }
        let mut grad_pre = vec![0.0; h];
        for j in 0..h {
            let a = t.hidden[j];
            let row_w = &self.data[w2 + j * d..w2 + (j + 1) * d];
            let mut back = 0.0;
            for m in 0..d {
                g[w2 + j * d + m] += a * grad_out[m];
                back += row_w[m] * grad_out[m];
            }
            grad_pre[j] = back * t.mask[j] * self.activation.derivative(t.pre[j]);
        }
        for (j, gp) in grad_pre.iter().enumerate() {
            g[b1 + j] += gp;
        }
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &mut g[w1 + i * h..w1 + (i + 1) * h];
            for (r, gp) in row.iter_mut().zip(&grad_pre) {
                *r += xi * gp;
            }
        }
    }

    // -- checkpoint I/O ----------------------------------------------------

    /// Little-endian: magic, version, k, h, d, activation, dropout, config
    /// hash, parameter count, parameters, CRC32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 8 * self.data.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.dims.input, self.dims.hidden, self.dims.output] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(self.activation.code());
        buf.extend_from_slice(&self.dropout.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 12 + 1 + 8 + 32 + 8;
        if bytes.len() < HEADER + 4 {
            return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32();
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let dims = Dims {
            input: r.u32() as usize,
            hidden: r.u32() as usize,
            output: r.u32() as usize,
        };
        let activation = Activation::from_code(r.u8())
            .ok_or_else(|| Error::Corrupt("unknown activation code".into()))?;
        let dropout = r.f64();
        let config_hash: [u8; 32] = r.take(32).try_into().unwrap();
        let count = r.u64() as usize;
        if count != dims.param_count() || body.len() != HEADER + 8 * count {
            return Err(Error::Corrupt(format!(
                "parameter count {count} inconsistent with dims {}x{}x{}",
                dims.input, dims.hidden, dims.output
            )));
        }
        let data = (0..count).map(|_| r.f64()).collect();
        Ok(ProjectionParams {
            dims,
            activation,
            dropout,
            config_hash,
            data,
            generation: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the box dimension against a configured value.
    pub fn load_expecting(path: &Path, box_dim: usize) -> Result<Self> {
        let p = Self::load(path)?;
        if p.dims.output != box_dim {
            return Err(Error::CheckpointDimMismatch {
                checkpoint: p.dims.output,
                configured: box_dim,
            });
        }
        Ok(p)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding table
// ---------------------------------------------------------------------------

/// Fixed input vectors keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<NodeId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, id: NodeId, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("embedding for `{id}` is not finite")));
        }
        self.rows.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.rows
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Vec<f64>)> {
        self.rows.iter()
    }

    /// First id from `ids` that has no row, if any.
    pub fn first_missing<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Option<&'a NodeId> {
        ids.into_iter().find(|id| !self.rows.contains_key(id.as_str()))
    }

    /// Header `dim<TAB>k`, then `id<TAB>v1,v2,...` per row.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "dim\t{}", self.dim)?;
        for (id, v) in &self.rows {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{id}\t{}", vals.join(","))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty embedding file"))?;
        let dim = match header.split_once('\t') {
            Some(("dim", k)) => k
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("bad dimension `{k}`")))?,
            _ => return Err(Error::parse(path, 1, "expected header `dim<TAB>k`")),
        };
        if dim == 0 {
            return Err(Error::parse(path, 1, "dimension must be positive"));
        }
        let mut table = EmbeddingTable::new(dim);
        for (lineno, line) in lines {
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>v1,v2,...`"))?;
            let v = vals
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, lineno, format!("bad float: {e}")))?;
            if v.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values, found {}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse(path, lineno, "non-finite value"));
            }
            let id = NodeId::new(id).map_err(|_| Error::parse(path, lineno, "empty id"))?;
            if table.rows.insert(id.clone(), v).is_some() {
                return Err(Error::parse(path, lineno, format!("duplicate id `{id}`")));
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(dropout: f64, act: Activation) -> ProjectionParams {
        ProjectionParams::init(
            Dims {
                input: 3,
                hidden: 4,
                output: 2,
            },
            act,
            dropout,
            5,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let dims = Dims {
            input: 768,
            hidden: 64,
            output: 128,
        };
        // independent count: four weight matrices plus four bias vectors
        let by_tensor = [768 * 64, 64, 64 * 128, 128, 768 * 64, 64, 64 * 128, 128];
        assert_eq!(dims.param_count(), by_tensor.iter().sum::<usize>());
        assert_eq!(dims.param_count(), 115_072);
        let a = ProjectionParams::init(dims, Activation::Relu, 0.2, 9).unwrap();
        let b = ProjectionParams::init(dims, Activation::Relu, 0.2, 9).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.values().len(), 115_072);
        let zero_box = a.forward_eval(&vec![0.0; 768]).unwrap();
        for o in zero_box.offset() {
            assert!((o - 0.5).abs() < 1e-12);
        }
        assert!(ProjectionParams::init(Dims { input: 0, hidden: 1, output: 1 }, Activation::Relu, 0.0, 0).is_err());
        assert!(ProjectionParams::init(dims, Activation::Relu, 1.0, 0).is_err());
    }

    #[test]
    fn hand_computed_single_unit() {
        // k=2, h=1, d=1
        let dims = Dims {
            input: 2,
            hidden: 1,
            output: 1,
        };
        let mut p = ProjectionParams::init(dims, Activation::Relu, 0.0, 0).unwrap();
        // W1c=[1, -2], b1c=0.5, W2c=[3], b2c=-1, W1o=[0.5, 0.5], b1o=0, W2o=[2], b2o=0.1
        p.values_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.5, 0.5, 0.0, 2.0, 0.1]);
        let b = p.forward_eval(&[2.0, 0.25]).unwrap();
        // center: relu(2 - 0.5 + 0.5) = 2 -> 3*2 - 1 = 5
        assert_eq!(b.center(), &[5.0]);
        // offset: relu(1 + 0.125) = 1.125 -> 2.25 + 0.1 = 2.35 -> softplus
        assert!((b.offset()[0] - (1.0 + 2.35f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn eval_is_deterministic_and_positive() {
        let p = ProjectionParams::init(Dims { input: 8, hidden: 6, output: 4 }, Activation::Gelu, 0.3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-10.0..10.0)).collect();
            let a = p.forward_eval(&x).unwrap();
            assert_eq!(a, p.forward_eval(&x).unwrap());
            assert!(a.offset().iter().all(|o| *o > 0.0));
        }
        assert!(matches!(p.forward_eval(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn no_dropout_train_matches_eval() {
        let p = tiny(0.0, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [0.3, -1.2, 0.8];
        let (b, _) = p.forward_train(&x, &mut rng).unwrap();
        assert_eq!(b, p.forward_eval(&x).unwrap());
    }

    fn fd_check(p: &ProjectionParams, x: &[f64], mc: &[f64], mo: &[f64]) {
        // upstream scalar: <a, center> + <b, offset>
        let a = [0.7, -1.3];
        let bw = [1.1, 0.4];
        let f = |q: &ProjectionParams| {
            let (b, _) = q.forward_with_masks(x, mc.to_vec(), mo.to_vec()).unwrap();
            b.center().iter().zip(&a).map(|(c, w)| c * w).sum::<f64>()
                + b.offset().iter().zip(&bw).map(|(o, w)| o * w).sum::<f64>()
        };
        let (_, trace) = p.forward_with_masks(x, mc.to_vec(), mo.to_vec()).unwrap();
        let g = p.backward(Some(&trace), &a, &bw).unwrap();
        let h = 1e-5;
        for i in 0..p.values().len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (fd - g.0[i]).abs() / fd.abs().max(g.0[i].abs()).max(1e-4);
            assert!(err < 1e-4, "param {i}: fd {fd} vs analytic {}", g.0[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            let p = tiny(0.5, act);
            let x = [0.9, -0.4, 1.7];
            fd_check(&p, &x, &[1.0; 4], &[1.0; 4]);
            fd_check(&p, &x, &[2.0, 0.0, 2.0, 2.0], &[0.0, 2.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn backward_edge_cases() {
        let p = tiny(0.0, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [0.9, -0.4, 1.7];
        let (_, trace) = p.forward_train(&x, &mut rng).unwrap();
        let g = p.backward(Some(&trace), &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(g.0.iter().all(|v| *v == 0.0));

        // all-keep mask under a dropout net == no-dropout backward
        let pd = {
            let mut q = p.clone();
            q.dropout = 0.4;
            q
        };
        let (_, t_keep) = pd.forward_with_masks(&x, vec![1.0; 4], vec![1.0; 4]).unwrap();
        let up = ([0.3, -0.2], [0.5, 0.9]);
        assert_eq!(
            pd.backward(Some(&t_keep), &up.0, &up.1).unwrap(),
            p.backward(Some(&trace), &up.0, &up.1).unwrap()
        );

        assert!(matches!(p.backward(None, &up.0, &up.1), Err(Error::MissingTrace)));
        let mut stale = p.clone();
        stale.values_mut()[0] += 1.0;
        assert!(matches!(stale.backward(Some(&trace), &up.0, &up.1), Err(Error::MissingTrace)));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gbxt");
        let mut p = tiny(0.2, Activation::Gelu);
        p.set_config_hash([7; 32]);
        p.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let q = ProjectionParams::load(&path).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(q.config_hash(), &[7; 32]);

        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(ProjectionParams::load(&path), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(matches!(ProjectionParams::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(ProjectionParams::from_bytes(&v2), Err(Error::VersionMismatch { found: 2, .. })));

        fs::write(&path, &bytes).unwrap();
        let err = ProjectionParams::load_expecting(&path, 16).unwrap_err();
        assert!(err.to_string().contains('2') && err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        let mut t = EmbeddingTable::new(3);
        t.insert(NodeId::new("a").unwrap(), vec![0.1, -2.5, 1e-17]).unwrap();
        t.insert(NodeId::new("b").unwrap(), vec![1.0 / 3.0, 0.0, 7.0]).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        fs::write(&path, &buf).unwrap();
        assert_eq!(EmbeddingTable::read(&path).unwrap(), t);

        fs::write(&path, "dim\t2\na\t1.0,2.0\nb\t1.0\n").unwrap();
        let err = EmbeddingTable::read(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        fs::write(&path, "2\na\t1.0,2.0\n").unwrap();
        assert!(EmbeddingTable::read(&path).is_err());
    }

    proptest! {
        #[test]
        fn offsets_positive(x in prop::collection::vec(-50.0f64..50.0, 3)) {
            let p = tiny(0.0, Activation::Relu);
            prop_assert!(p.forward_eval(&x).unwrap().offset().iter().all(|o| *o > 0.0));
        }
    }
}
