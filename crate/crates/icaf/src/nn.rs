//! Parameters, layers, the optimizer, checkpoints and gradient checking.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`encoder.stage1.block0.conv1.weight`). Forward code binds the store onto
//! a tape per step, reads [`Var`]s by name, and the optimizer applies
//! gradients back by the same names. All random initialization draws happen
//! in `f64` regardless of the training element type, so parameter streams
//! are bit-identical across precisions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{sc, Grads, Scalar, Tape, Var};

/// Named parameter arrays in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<A: Scalar> {
    entries: IndexMap<String, ArrayD<A>>,
}

impl<A: Scalar> Default for ParamStore<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> ParamStore<A> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<A>) {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<A> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<A> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<A>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Convert every array to another element type (draw-stream preserving).
    pub fn cast<B: Scalar>(&self) -> ParamStore<B> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| sc::<B>(x.to_f64()))))
                .collect(),
        }
    }

    /// Push every parameter onto the tape; `trainable=false` binds them as
    /// constants (eval mode).
    pub fn bind(&self, tape: &mut Tape<A>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collect gradients for every bound parameter; parameters the loss does
    /// not reach get zero gradients.
    pub fn grads<A: Scalar>(&self, store: &ParamStore<A>, mut grads: Grads<A>) -> ParamGrads<A> {
        let map = self
            .vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| ArrayD::zeros(store.get(k).raw_dim()));
                (k.clone(), g)
            })
            .collect();
        ParamGrads { entries: map }
    }
}

/// Gradients keyed like their [`ParamStore`].
pub struct ParamGrads<A: Scalar> {
    pub entries: IndexMap<String, ArrayD<A>>,
}

impl<A: Scalar> ParamGrads<A> {
    pub fn get(&self, name: &str) -> &ArrayD<A> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient: {name}"))
    }
}

// ---------------------------------------------------------------------------
// Initialization and layer helpers
// ---------------------------------------------------------------------------

/// Draw a fan-in-scaled normal array (He init); all draws are f64.
fn he_normal<A: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<A> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sc(dist.sample(rng)))
}

/// Register a conv layer's weight (He init) and zero bias.
pub fn register_conv<A: Scalar>(
    store: &mut ParamStore<A>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
) {
    let w = he_normal(rng, &[c_out, c_in, k, k], c_in * k * k);
    store.insert(&format!("{name}.weight"), w);
    if bias {
        store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
    }
}

/// Register group-norm affine parameters (gamma=1, beta=0).
pub fn register_norm<A: Scalar>(store: &mut ParamStore<A>, name: &str, channels: usize) {
    store.insert(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
    store.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
}

/// Forward a registered conv layer.
pub fn conv<A: Scalar>(
    tape: &mut Tape<A>,
    bound: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bound.var(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = bound.vars.get(&bias_name).copied();
    tape.conv2d(x, w, b, stride, pad)
}

/// Largest divisor of `channels` that is ≤ 8, used as the norm group count.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Forward a registered group norm.
pub fn group_norm<A: Scalar>(tape: &mut Tape<A>, bound: &Bound, name: &str, x: Var) -> Var {
    let gamma = bound.var(&format!("{name}.gamma"));
    let beta = bound.var(&format!("{name}.beta"));
    let channels = tape.value(gamma).len();
    tape.group_norm(x, gamma, beta, norm_groups(channels), 1e-5)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with momentum and selective weight decay. Decay applies only to
/// parameters named `*.weight`; biases and norm affines are exempt.
pub struct Sgd<A: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, ArrayD<A>>,
}

impl<A: Scalar> Sgd<A> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    /// v ← m·v + (g + wd·p); p ← p − lr·v
    pub fn step(&mut self, params: &mut ParamStore<A>, grads: &ParamGrads<A>, lr: f64) {
        let m: A = sc(self.momentum);
        let lr: A = sc(lr);
        for (name, p) in params.entries.iter_mut() {
            let g = grads.get(name);
            let wd: A = if name.ends_with(".weight") {
                sc(self.weight_decay)
            } else {
                A::zero()
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *v).and(g).and(&*p).for_each(|v, &g, &p| {
                *v = m * *v + g + wd * p;
            });
            ndarray::Zip::from(p).and(&*v).for_each(|p, &v| {
                *p = *p - lr * v;
            });
        }
    }

    pub fn velocity(&self) -> &IndexMap<String, ArrayD<A>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: IndexMap<String, ArrayD<A>>) {
        self.velocity = velocity;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ICAFCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializable ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// On-disk training state: parameters (always stored as f64), optimizer
/// velocity, the resolved-config digest and the training rng position.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_digest: String,
    pub epoch: u64,
    pub step: u64,
    pub params: ParamStore<f64>,
    pub velocity: IndexMap<String, ArrayD<f64>>,
    pub rng: RngState,
}

fn write_array(w: &mut impl Write, name: &str, a: &ArrayD<f64>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(a.ndim() as u32)?;
    for &d in a.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> std::io::Result<(String, ArrayD<f64>)> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok((name, arr))
}

impl Checkpoint {
    /// Atomic save: write to a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let io_err = |e| Error::io(&tmp, e);
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
        (|| -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            w.write_u32::<LittleEndian>(CKPT_VERSION)?;
            w.write_u32::<LittleEndian>(self.config_digest.len() as u32)?;
            w.write_all(self.config_digest.as_bytes())?;
            w.write_u64::<LittleEndian>(self.epoch)?;
            w.write_u64::<LittleEndian>(self.step)?;
            w.write_all(&self.rng.seed)?;
            w.write_u64::<LittleEndian>(self.rng.word_pos as u64)?;
            w.write_u64::<LittleEndian>((self.rng.word_pos >> 64) as u64)?;
            w.write_u64::<LittleEndian>(self.params.len() as u64)?;
            for (name, a) in self.params.iter() {
                write_array(&mut w, name, a)?;
            }
            w.write_u64::<LittleEndian>(self.velocity.len() as u64)?;
            for (name, a) in &self.velocity {
                write_array(&mut w, name, a)?;
            }
            w.flush()
        })()
        .map_err(io_err)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load and, when `expect_digest` is given, verify config compatibility.
    pub fn load(path: &Path, expect_digest: Option<&str>) -> Result<Checkpoint> {
        let io_err = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let parsed = (|| -> std::io::Result<Checkpoint> {
            let dlen = r.read_u32::<LittleEndian>()? as usize;
            let mut digest = vec![0u8; dlen];
            r.read_exact(&mut digest)?;
            let config_digest = String::from_utf8(digest)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let epoch = r.read_u64::<LittleEndian>()?;
            let step = r.read_u64::<LittleEndian>()?;
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed)?;
            let lo = r.read_u64::<LittleEndian>()? as u128;
            let hi = r.read_u64::<LittleEndian>()? as u128;
            let rng = RngState {
                seed,
                word_pos: lo | (hi << 64),
            };
            let n_params = r.read_u64::<LittleEndian>()? as usize;
            let mut params = ParamStore::new();
            for _ in 0..n_params {
                let (name, a) = read_array(&mut r)?;
                params.insert(&name, a);
            }
            let n_vel = r.read_u64::<LittleEndian>()? as usize;
            let mut velocity = IndexMap::new();
            for _ in 0..n_vel {
                let (name, a) = read_array(&mut r)?;
                velocity.insert(name, a);
            }
            Ok(Checkpoint {
                config_digest,
                epoch,
                step,
                params,
                velocity,
                rng,
            })
        })()
        .map_err(io_err)?;
        if let Some(expect) = expect_digest {
            if parsed.config_digest != expect {
                return Err(Error::Checkpoint(format!(
                    "{}: config digest mismatch (checkpoint {}, expected {})",
                    path.display(),
                    parsed.config_digest,
                    expect
                )));
            }
        }
        Ok(parsed)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// One (parameter, flat element index) coordinate to probe.
#[derive(Clone, Debug)]
pub struct ParamPick {
    pub name: String,
    pub index: usize,
}

/// One probed coordinate's analytic/numeric comparison.
#[derive(Clone, Debug)]
pub struct GradCheckRecord {
    pub pick: ParamPick,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Draw `n` random coordinates from parameters whose name passes `filter`.
pub fn random_picks(
    store: &ParamStore<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
    filter: impl Fn(&str) -> bool,
) -> Vec<ParamPick> {
    let pool: Vec<(&str, usize)> = store
        .iter()
        .filter(|(name, _)| filter(name))
        .map(|(name, a)| (name, a.len()))
        .collect();
    assert!(!pool.is_empty(), "random_picks: no parameters match filter");
    let total: usize = pool.iter().map(|(_, l)| l).sum();
    (0..n)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for (name, len) in &pool {
                if flat < *len {
                    return ParamPick {
                        name: name.to_string(),
                        index: flat,
                    };
                }
                flat -= len;
            }
            unreachable!()
        })
        .collect()
}

/// Compare analytic gradients against central finite differences of `loss`
/// at the probed coordinates. `loss` must be a pure function of the store.
pub fn check_gradients(
    store: &ParamStore<f64>,
    analytic: &ParamGrads<f64>,
    picks: &[ParamPick],
    step: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> Vec<GradCheckRecord> {
    let mut work = store.clone();
    picks
        .iter()
        .map(|pick| {
            let orig = store.get(&pick.name).as_slice().unwrap()[pick.index];
            {
                let a = work.get_mut(&pick.name);
                a.as_slice_mut().unwrap()[pick.index] = orig + step;
            }
            let fp = loss(&work);
            {
                let a = work.get_mut(&pick.name);
                a.as_slice_mut().unwrap()[pick.index] = orig - step;
            }
            let fm = loss(&work);
            {
                let a = work.get_mut(&pick.name);
                a.as_slice_mut().unwrap()[pick.index] = orig;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let an = analytic.get(&pick.name).as_slice().unwrap()[pick.index];
            let rel_err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            GradCheckRecord {
                pick: pick.clone(),
                analytic: an,
                numeric,
                rel_err,
            }
        })
        .collect()
}
