//! Self-attention variants over `[H*W, C]` token maps: the full multi-head
//! reference, efficient self-attention with spatial sequence reduction, and
//! distortion-aware neighborhood attention with a trainable relative
//! positional table added to the attended values.

use std::rc::Rc;

use numkit::{rng_uniform, Binding, NeighborTable, ParamId, ParamStore, PatchGeometry, Rng, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DatrError, Result};
use crate::layers::{LayerNorm, Linear};

/// Bound of the uniform initialization of relative positional tables.
pub const RPE_INIT_BOUND: f64 = 0.02;
const PROJ_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    Rpe,
    Ape,
    None,
}

impl std::str::FromStr for PeMode {
    type Err = DatrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rpe" => Ok(PeMode::Rpe),
            "ape" => Ok(PeMode::Ape),
            "none" => Ok(PeMode::None),
            other => Err(DatrError::Config(format!("unknown positional encoding {other:?}"))),
        }
    }
}

/// Neighborhood attention hyperparameters for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaConfig {
    pub window_h: usize,
    pub window_w: usize,
    pub heads: usize,
    pub d_head: usize,
    pub pe_mode: PeMode,
    pub wrap_horizontal: bool,
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_h == 0 || self.window_w == 0 || self.window_h % 2 == 0 || self.window_w % 2 == 0 {
            return Err(DatrError::Config(format!(
                "neighborhood window {}x{} must be odd and >= 1",
                self.window_h, self.window_w
            )));
        }
        if self.heads == 0 || self.d_head == 0 {
            return Err(DatrError::Config("heads and d_head must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn slots(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }
}

fn window_start(center: usize, extent: usize, len: usize) -> usize {
    (center.saturating_sub(extent / 2)).min(len - extent)
}

/// Positions attended by pixel `(i, j)` of an `h x w` map, row-major within
/// the window.
///
/// The window shifts inward at non-wrapped borders so every pixel sees the
/// same number of keys; a window larger than an axis clamps to the whole
/// axis. With `wrap_horizontal` columns are taken modulo `w` instead.
pub fn neighborhood_indices(i: usize, j: usize, h: usize, w: usize, cfg: &DaConfig) -> Result<Vec<(usize, usize)>> {
    if i >= h || j >= w {
        return Err(DatrError::Domain(format!("pixel ({i}, {j}) outside {h}x{w}")));
    }
    let eh = cfg.window_h.min(h);
    let ew = cfg.window_w.min(w);
    let r0 = window_start(i, eh, h);
    let cols: Vec<usize> = if cfg.wrap_horizontal && cfg.window_w < w {
        let half = cfg.window_w / 2;
        (0..cfg.window_w).map(|t| (j + w - half + t) % w).collect()
    } else {
        let c0 = window_start(j, ew, w);
        (c0..c0 + ew).collect()
    };
    Ok((r0..r0 + eh).flat_map(|r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Gather table for the whole map. The positional slot of a key is its
/// `(row, col)` offset inside the (shifted) window, laid out on the full
/// `window_h x window_w` grid.
pub fn neighbor_table(h: usize, w: usize, cfg: &DaConfig) -> Result<NeighborTable> {
    let eh = cfg.window_h.min(h);
    let ew = if cfg.wrap_horizontal && cfg.window_w < w { cfg.window_w } else { cfg.window_w.min(w) };
    let per_query = eh * ew;
    let mut keys = Vec::with_capacity(h * w * per_query);
    let mut slots = Vec::with_capacity(h * w * per_query);
    for i in 0..h {
        for j in 0..w {
            let idx = neighborhood_indices(i, j, h, w, cfg)?;
            for (t, (r, c)) in idx.into_iter().enumerate() {
                keys.push((r * w + c) as u32);
                slots.push(((t / ew) * cfg.window_w + t % ew) as u32);
            }
        }
    }
    Ok(NeighborTable {
        per_query,
        num_slots: cfg.slots(),
        keys,
        slots,
    })
}

/// Trainable relative positional table `[heads, window_h * window_w, d_head]`.
pub fn rpe_init<T: Scalar>(cfg: &DaConfig, rng: &mut Rng) -> Tensor<T> {
    rng_uniform(rng, &[cfg.heads, cfg.slots(), cfg.d_head], -RPE_INIT_BOUND, RPE_INIT_BOUND)
}

/// Fixed 2-D sinusoidal absolute encoding `[h * w, c]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_2d<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = (c / 2).max(1);
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let (pos, k) = if ch < half { (i, ch) } else { (j, ch - half) };
                let freq = 1.0 / 10_000f64.powf(2.0 * (k / 2) as f64 / half as f64);
                let a = pos as f64 * freq;
                data.push(T::from_f64(if k % 2 == 0 { a.sin() } else { a.cos() }));
            }
        }
    }
    Tensor::from_vec(&[h * w, c], data).expect("shape")
}

/// Query/key/value and output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl AttnProjections {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DatrError::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, PROJ_STD, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, PROJ_STD, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, PROJ_STD, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, PROJ_STD, rng)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.fan_in
    }

    pub fn d_head(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Standard multi-head self-attention over the whole sequence, composed
/// from primitive tape ops (per-head slicing, `Q K^T`, softmax, `A V`).
pub fn mhsa_reference<T: Scalar>(tape: &mut Tape<T>, p: &Binding, attn: &AttnProjections, x: Var) -> Result<Var> {
    let q = attn.q.forward(tape, p, x)?;
    let k = attn.k.forward(tape, p, x)?;
    let v = attn.v.forward(tape, p, x)?;
    let dh = attn.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(a, vh)?);
    }
    let merged = tape.concat_last(&heads)?;
    attn.proj.forward(tape, p, merged)
}

/// Efficient self-attention: keys and values come from the map reduced by
/// non-overlapping `r x r` patches (flattened, linearly projected back to
/// `C`, layer-normalized); queries keep full length. Maps whose sides are not
/// multiples of `r` are zero-padded at the bottom/right.
#[derive(Debug, Clone)]
pub struct EsaLayer {
    pub attn: AttnProjections,
    pub reduction: usize,
    pub reduce: Option<(Linear, LayerNorm)>,
}

impl EsaLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(DatrError::Config("ESA reduction ratio must be >= 1".into()));
        }
        let attn = AttnProjections::new(store, name, dim, heads, rng)?;
        let reduce = if reduction > 1 {
            let fan_in = reduction * reduction * dim;
            let lin = Linear::new(store, &format!("{name}.sr"), fan_in, dim, (2.0 / fan_in as f64).sqrt(), rng)?;
            Some((lin, LayerNorm::new(store, &format!("{name}.sr_norm"), dim)?))
        } else {
            None
        };
        Ok(Self { attn, reduction, reduce })
    }

    /// Keys/values sequence after reduction, `[ceil(h/r) * ceil(w/r), C]`.
    pub fn reduced<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        match &self.reduce {
            None => Ok(x),
            Some((lin, norm)) => {
                let g = PatchGeometry::blocks(h, w, self.attn.dim(), self.reduction)?;
                let cols = tape.unfold(x, g)?;
                let y = lin.forward(tape, p, cols)?;
                norm.forward(tape, p, y)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        let q = self.attn.q.forward(tape, p, x)?;
        let kv = self.reduced(tape, p, x, h, w)?;
        let k = self.attn.k.forward(tape, p, kv)?;
        let v = self.attn.v.forward(tape, p, kv)?;
        let scale = 1.0 / (self.attn.d_head() as f64).sqrt();
        let o = tape.attention(q, k, v, self.attn.heads, scale)?;
        self.attn.proj.forward(tape, p, o)
    }
}

/// Distortion-aware attention: each pixel attends to its neighborhood only,
/// `softmax(q k^T / sqrt(d_head)) (v + rpe)`.
#[derive(Debug, Clone)]
pub struct DaLayer {
    pub cfg: DaConfig,
    pub attn: AttnProjections,
    pub rpe: Option<ParamId>,
}

impl DaLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: DaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let attn = AttnProjections::new(store, name, cfg.channels(), cfg.heads, rng)?;
        let rpe = match cfg.pe_mode {
            PeMode::Rpe => Some(store.add(format!("{name}.rpe"), rpe_init(&cfg, rng))?),
            _ => None,
        };
        Ok(Self { cfg, attn, rpe })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.cfg.channels();
        if tape.shape(x) != [h * w, c] {
            return Err(DatrError::Domain(format!(
                "DA input {:?} does not match {h}x{w}x{c}",
                tape.shape(x)
            )));
        }
        let x = if self.cfg.pe_mode == PeMode::Ape {
            let pe = tape.constant(sinusoidal_2d(h, w, c));
            tape.add(x, pe)?
        } else {
            x
        };
        let q = self.attn.q.forward(tape, p, x)?;
        let k = self.attn.k.forward(tape, p, x)?;
        let v = self.attn.v.forward(tape, p, x)?;
        let table = Rc::new(neighbor_table(h, w, &self.cfg)?);
        let o = tape.neighborhood_attention(q, k, v, self.rpe.map(|r| p.var(r)), table, self.cfg.heads, self.cfg.scale())?;
        self.attn.proj.forward(tape, p, o)
    }
}
