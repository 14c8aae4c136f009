//! The prototype bank and its versioned little-endian binary file.
//!
//! Layout, all integers `u32` unless noted and all reals `f64`:
//!
//! ```text
//! "MUSLEBANK" version
//! C  n_scales  (scale  D_x:u64) × n_scales  d_phi  d_coord  d_edge_c
//! len  run-config JSON bytes
//! n_params  (name_len name rows cols values) × n_params      graph networks
//! n_cells   per cell:
//!   class scale K' kind:u8 φ[K'] μ[K'·D] Σ[K'·D or K'·D·D]
//!   d_x hidden K'  w1 b1 w2 b2
//!   n_hist K-history
//! ```

use std::fs;
use std::path::Path;

use super::layer::MembershipNet;
use super::{Covariance, CovarianceKind, MixtureParams};
use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::GraphParams;

pub const BANK_MAGIC: &[u8; 9] = b"MUSLEBANK";
pub const BANK_VERSION: u32 = 1;

/// Trained state of one (class, scale) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub class: usize,
    pub scale: usize,
    pub net: MembershipNet,
    /// EMA mixture used at inference.
    pub ema: MixtureParams,
    /// `K` at the end of each epoch.
    pub k_history: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub config: RunConfig,
    pub store: ParamStore,
    pub graph: GraphParams,
    /// Sorted by `(class, scale)`.
    pub cells: Vec<CellState>,
}

impl PrototypeBank {
    pub fn cell(&self, class: usize, scale: usize) -> Option<&CellState> {
        self.cells
            .binary_search_by(|c| (c.class, c.scale).cmp(&(class, scale)))
            .ok()
            .map(|i| &self.cells[i])
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

impl PartialEq for PrototypeBank {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.cells == other.cells
            && self.store.len() == other.store.len()
            && self.store.iter().zip(other.store.iter()).all(|(a, b)| a == b)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::BankFormat(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u32(t.rows())?;
        self.u32(t.cols())?;
        self.f64s(t.data());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::BankFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::BankFormat("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let r = self.u32()?;
        let c = self.u32()?;
        Tensor::from_vec(r, c, self.f64s(r * c)?)
    }
}

/// Serializes a bank to bytes.
pub fn encode_bank(bank: &PrototypeBank) -> Result<Vec<u8>> {
    let cfg = &bank.config;
    let dims = cfg.graph_dims();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(BANK_MAGIC);
    w.u32(BANK_VERSION as usize)?;
    w.u32(cfg.num_classes)?;
    w.u32(cfg.scales.len())?;
    for &s in &cfg.scales {
        w.u32(s)?;
        w.u64(dims.d_x(s) as u64);
    }
    w.u32(cfg.d_phi)?;
    w.u32(cfg.d_coord)?;
    w.u32(cfg.d_edge_c)?;
    let json = serde_json::to_vec(cfg).map_err(|e| Error::BankFormat(e.to_string()))?;
    w.bytes(&json)?;

    let graph_ids = bank.graph.ids();
    w.u32(graph_ids.len())?;
    for id in graph_ids {
        w.bytes(bank.store.name(id).as_bytes())?;
        w.tensor(bank.store.value(id))?;
    }

    w.u32(bank.cells.len())?;
    for cell in &bank.cells {
        let mix = &cell.ema;
        w.u32(cell.class)?;
        w.u32(cell.scale)?;
        w.u32(mix.k())?;
        w.u8(match mix.kind() {
            CovarianceKind::Diagonal => 0,
            CovarianceKind::Full => 1,
        });
        w.f64s(&mix.weights);
        w.f64s(mix.means.data());
        match &mix.cov {
            Covariance::Diagonal(v) => w.f64s(v.data()),
            Covariance::Full(m) => m.iter().for_each(|c| w.f64s(c.data())),
        }
        let k = cell.net.k(&bank.store);
        w.u32(cell.net.d_x)?;
        w.u32(cell.net.hidden)?;
        w.u32(k)?;
        for id in cell.net.mlp.ids() {
            w.f64s(bank.store.value(id).data());
        }
        w.f64s(bank.store.value(cell.net.shift).data());
        w.f64s(bank.store.value(cell.net.scale).data());
        w.u32(cell.k_history.len())?;
        for &h in &cell.k_history {
            w.u32(h)?;
        }
    }
    Ok(w.0)
}

/// Parses bytes produced by [`encode_bank`].
pub fn decode_bank(buf: &[u8]) -> Result<PrototypeBank> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(BANK_MAGIC.len())? != BANK_MAGIC {
        return Err(Error::BankFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != BANK_VERSION as usize {
        return Err(Error::BankFormat(format!("unsupported version {version}")));
    }
    let c = r.u32()?;
    let n_scales = r.u32()?;
    let mut echo = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        echo.push((r.u32()?, r.u64()?));
    }
    let (d_phi, d_coord, d_edge_c) = (r.u32()?, r.u32()?, r.u32()?);
    let config: RunConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::BankFormat(format!("config echo: {e}")))?;
    config.validate().map_err(|e| Error::BankFormat(e.to_string()))?;
    let dims = config.graph_dims();
    let expect: Vec<(usize, u64)> = config.scales.iter().map(|&s| (s, dims.d_x(s) as u64)).collect();
    if c != config.num_classes
        || echo != expect
        || (d_phi, d_coord, d_edge_c) != (config.d_phi, config.d_coord, config.d_edge_c)
    {
        return Err(Error::BankFormat("header disagrees with config echo".into()));
    }

    let mut store = ParamStore::new();
    let n_params = r.u32()?;
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::BankFormat("parameter name is not UTF-8".into()))?;
        let t = r.tensor()?;
        store.insert(name, t)?;
    }
    let graph = GraphParams::lookup(&store, dims)?;

    let n_cells = r.u32()?;
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let class = r.u32()?;
        let scale = r.u32()?;
        let k = r.u32()?;
        let d = dims.d_x(scale);
        let kind = match r.u8()? {
            0 => CovarianceKind::Diagonal,
            1 => CovarianceKind::Full,
            other => return Err(Error::BankFormat(format!("unknown covariance kind {other}"))),
        };
        let weights = r.f64s(k)?;
        let means = Tensor::from_vec(k, d, r.f64s(k * d)?)?;
        let cov = match kind {
            CovarianceKind::Diagonal => Covariance::Diagonal(Tensor::from_vec(k, d, r.f64s(k * d)?)?),
            CovarianceKind::Full => Covariance::Full(
                (0..k)
                    .map(|_| Tensor::from_vec(d, d, r.f64s(d * d)?))
                    .collect::<Result<_>>()?,
            ),
        };
        let ema = MixtureParams { weights, means, cov };
        ema.validate(config.var_floor)
            .map_err(|e| Error::BankFormat(format!("cell ({class}, {scale}): {e}")))?;
        let (d_x, hidden, k_net) = (r.u32()?, r.u32()?, r.u32()?);
        if d_x != d || k_net != k {
            return Err(Error::BankFormat(format!(
                "cell ({class}, {scale}): net shape {d_x}x{k_net}, expected {d}x{k}"
            )));
        }
        let prefix = MembershipNet::prefix(class, scale);
        store.insert(format!("{prefix}.w1"), Tensor::from_vec(d_x, hidden, r.f64s(d_x * hidden)?)?)?;
        store.insert(format!("{prefix}.b1"), Tensor::from_vec(1, hidden, r.f64s(hidden)?)?)?;
        store.insert(format!("{prefix}.w2"), Tensor::from_vec(hidden, k, r.f64s(hidden * k)?)?)?;
        store.insert(format!("{prefix}.b2"), Tensor::from_vec(1, k, r.f64s(k)?)?)?;
        store.insert(format!("{prefix}.in_shift"), Tensor::row(r.f64s(d_x)?))?;
        store.insert(format!("{prefix}.in_scale"), Tensor::row(r.f64s(d_x)?))?;
        let net = MembershipNet::lookup(&store, class, scale)?;
        let n_hist = r.u32()?;
        let k_history = (0..n_hist).map(|_| r.u32()).collect::<Result<_>>()?;
        cells.push(CellState {
            class,
            scale,
            net,
            ema,
            k_history,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::BankFormat(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if cells.windows(2).any(|w| (w[0].class, w[0].scale) >= (w[1].class, w[1].scale)) {
        return Err(Error::BankFormat("cells out of order".into()));
    }
    Ok(PrototypeBank {
        config,
        store,
        graph,
        cells,
    })
}

pub fn save_bank(bank: &PrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bank(bank)?).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&buf)
}
