//! Parameter storage, basic layers, the Adam optimizer, and checkpoint I/O.

use crate::tensor::{Tape, T};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: (usize, usize), expected: (usize, usize) },
}

/// Slot id of a named parameter tensor.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Values are `Arc`d so tapes can reference them
/// without copying.
pub struct Params {
    names: Vec<String>,
    values: Vec<Arc<Array2<f64>>>,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.values[id.0].dim(), value.dim());
        self.values[id.0] = Arc::new(value);
    }

    /// Mutate in place (clones only if a tape still holds the old version).
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn count_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Put this parameter on a tape as a differentiable leaf.
    pub fn on(&self, tape: &mut Tape, id: ParamId) -> T {
        tape.leaf(Arc::clone(&self.values[id.0]), id.0)
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform(-limit, limit) with the Glorot limit for the given fan.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-limit..limit))
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-limit..limit))
    }

    pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
        Array2::zeros((rows, cols))
    }
}

/// Fully connected layer.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = params.register(&format!("{name}.w"), init.xavier(d_in, d_out));
        let b = params.register(&format!("{name}.b"), Init::zeros(1, d_out));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply(&self, tape: &mut Tape, params: &Params, x: T) -> T {
        assert_eq!(
            tape.value(x).ncols(),
            self.d_in,
            "linear input width mismatch"
        );
        let w = params.on(tape, self.w);
        let b = params.on(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

/// Two-layer scoring perceptron (hidden relu, scalar output).
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            l1: Linear::new(params, init, &format!("{name}.l1"), d_in, d_hidden),
            l2: Linear::new(params, init, &format!("{name}.l2"), d_hidden, d_out),
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &Params, x: T) -> T {
        let h = self.l1.apply(tape, params, x);
        let h = tape.relu(h);
        self.l2.apply(tape, params, h)
    }
}

/// Single LSTM cell; gate order in the packed matrices is i, f, g, o.
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(params: &mut Params, init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Self {
        let wx = params.register(&format!("{name}.wx"), init.xavier(d_in, 4 * hidden));
        let wh = params.register(&format!("{name}.wh"), init.xavier(hidden, 4 * hidden));
        // forget gate bias starts at 1
        let mut b0 = Init::zeros(1, 4 * hidden);
        b0.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let b = params.register(&format!("{name}.b"), b0);
        LstmCell { wx, wh, b, d_in, hidden }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> (T, T) {
        let h = tape.constant(Array2::zeros((batch, self.hidden)));
        let c = tape.constant(Array2::zeros((batch, self.hidden)));
        (h, c)
    }

    /// One step. `mask` (per-example 0/1) carries the previous state through
    /// for padded positions.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: T,
        state: (T, T),
        mask: Option<&Arc<Vec<f64>>>,
    ) -> (T, T) {
        let (h_prev, c_prev) = state;
        let wx = params.on(tape, self.wx);
        let wh = params.on(tape, self.wh);
        let b = params.on(tape, self.b);
        let gx = tape.matmul(x, wx);
        let gh = tape.matmul(h_prev, wh);
        let g = tape.add(gx, gh);
        let g = tape.add_bias(g, b);
        let hd = self.hidden;
        let i = tape.slice_cols(g, 0, hd);
        let f = tape.slice_cols(g, hd, 2 * hd);
        let cand = tape.slice_cols(g, 2 * hd, 3 * hd);
        let o = tape.slice_cols(g, 3 * hd, 4 * hd);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let cand = tape.tanh(cand);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c_prev);
        let ic = tape.mul(i, cand);
        let c_new = tape.add(fc, ic);
        let ct = tape.tanh(c_new);
        let h_new = tape.mul(o, ct);
        match mask {
            None => (h_new, c_new),
            Some(m) => {
                let h = tape.blend_rows(h_new, h_prev, Arc::clone(m));
                let c = tape.blend_rows(c_new, c_prev, Arc::clone(m));
                (h, c)
            }
        }
    }
}

/// Adam with global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, clip_norm: Option<f64>) -> Self {
        let m = params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect();
        let v = params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, t: 0, m, v }
    }

    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut Params, grads: &mut [Option<Array2<f64>>]) -> f64 {
        assert_eq!(grads.len(), params.len());
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.mapv(|x| x * x).sum();
        }
        let norm = sq.sqrt();
        if let Some(clip) = self.clip_norm {
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut().flatten() {
                    *g *= scale;
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.get_mut(ParamId(idx));
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        norm
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

const CKPT_MAGIC: &[u8; 4] = b"QACK";

/// Write all parameters plus a configuration document. A JSON sidecar with
/// the configuration is written next to the archive.
pub fn save_checkpoint(
    path: &Path,
    params: &Params,
    config: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let manifest = CheckpointManifest {
        config: config.clone(),
        tensors: params
            .ids()
            .map(|id| {
                let v = params.get(id);
                TensorEntry {
                    name: params.name(id).to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                }
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_u32::<LittleEndian>(mjson.len() as u32)?;
    f.write_all(&mjson)?;
    for id in params.ids() {
        for &x in params.get(id).iter() {
            f.write_f64::<LittleEndian>(x)?;
        }
    }
    f.flush()?;
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    std::fs::write(sidecar, serde_json::to_vec_pretty(config)?)?;
    Ok(())
}

/// Read only the configuration document from a checkpoint.
pub fn load_checkpoint_config(path: &Path) -> Result<serde_json::Value, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mlen = f.read_u32::<LittleEndian>()? as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mjson)?;
    Ok(manifest.config)
}

/// Restore parameter values into an already-built store; names and shapes
/// must match exactly.
pub fn load_checkpoint(path: &Path, params: &mut Params) -> Result<serde_json::Value, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mlen = f.read_u32::<LittleEndian>()? as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mjson)?;
    let mut by_name: std::collections::HashMap<String, Array2<f64>> = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let mut data = vec![0.0f64; entry.rows * entry.cols];
        for x in data.iter_mut() {
            *x = f.read_f64::<LittleEndian>()?;
        }
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), data)
            .expect("manifest shape consistent with payload");
        by_name.insert(entry.name.clone(), arr);
    }
    for id in params.ids() {
        let name = params.name(id).to_string();
        let arr = by_name
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        let expected = params.get(id).dim();
        if arr.dim() != expected {
            return Err(CheckpointError::ShapeMismatch { name, found: arr.dim(), expected });
        }
        params.set(id, arr);
    }
    Ok(manifest.config)
}

/// Global L2 norm over a parameter gradient table.
pub fn grad_norm(grads: &[Option<Array2<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.mapv(|x| x * x).sum())
        .sum::<f64>()
        .sqrt()
}

/// Mean over axis 0 helper used by probes and tests.
pub fn row_mean(a: &Array2<f64>) -> ndarray::Array1<f64> {
    a.mean_axis(Axis(0)).expect("non-empty")
}
