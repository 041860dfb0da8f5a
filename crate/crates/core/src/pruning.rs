//! Unstructured magnitude pruning over five weight scopes.
//!
//! A weight's magnitude is its absolute value. Candidates are ranked by the
//! total order `(|w|, tensor index in scope, flat offset)`, so every drop set
//! is unique, the sets for increasing fractions nest, and masks are
//! reproducible on any platform.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearKind, ModelConfig, ModelParams};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PruneStrategy {
    /// Each linear tensor loses its own lowest fraction.
    #[serde(rename = "layer-wise")]
    LayerWise,
    /// One threshold over every linear tensor of every block.
    #[serde(rename = "global")]
    GlobalAllLinear,
    /// One threshold over the attention projections only.
    #[serde(rename = "global-attention")]
    GlobalAttentionOnly,
    /// One threshold over the linear tensors of the first ⌈L/4⌉ blocks.
    #[serde(rename = "first-quarter")]
    GlobalFirstQuarterLayers,
    /// One threshold over the linear tensors of the last ⌈L/4⌉ blocks.
    #[serde(rename = "last-quarter")]
    GlobalLastQuarterLayers,
}

impl PruneStrategy {
    pub const ALL: [PruneStrategy; 5] = [
        PruneStrategy::LayerWise,
        PruneStrategy::GlobalAllLinear,
        PruneStrategy::GlobalAttentionOnly,
        PruneStrategy::GlobalFirstQuarterLayers,
        PruneStrategy::GlobalLastQuarterLayers,
    ];

    /// Stable identifier used on the command line, in file names and reports.
    pub fn id(self) -> &'static str {
        match self {
            PruneStrategy::LayerWise => "layer-wise",
            PruneStrategy::GlobalAllLinear => "global",
            PruneStrategy::GlobalAttentionOnly => "global-attention",
            PruneStrategy::GlobalFirstQuarterLayers => "first-quarter",
            PruneStrategy::GlobalLastQuarterLayers => "last-quarter",
        }
    }

    /// Column heading in rendered tables.
    pub fn heading(self) -> &'static str {
        match self {
            PruneStrategy::LayerWise => "Layer-wise",
            PruneStrategy::GlobalAllLinear => "Global",
            PruneStrategy::GlobalAttentionOnly => "Attention",
            PruneStrategy::GlobalFirstQuarterLayers => "First 25%",
            PruneStrategy::GlobalLastQuarterLayers => "Last 25%",
        }
    }

    pub fn is_global(self) -> bool {
        self != PruneStrategy::LayerWise
    }
}

impl fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PruneStrategy::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| {
                let known: Vec<_> = PruneStrategy::ALL.iter().map(|p| p.id()).collect();
                Error::InvalidSpec(format!("unknown strategy `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
    /// Share of in-scope weights to zero, in `[0, 1)`.
    pub fraction: f64,
}

impl PruneSpec {
    pub fn new(strategy: PruneStrategy, fraction: f64) -> Result<Self> {
        let spec = Self { strategy, fraction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::InvalidSpec(format!(
                "fraction {} outside [0, 1)",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// One linear weight matrix of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorRef {
    pub layer: usize,
    pub kind: LinearKind,
}

impl TensorRef {
    pub fn name(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind)
    }

    pub fn get<'a>(&self, params: &'a ModelParams) -> &'a Tensor2D {
        params.layers[self.layer].linear(self.kind)
    }

    pub fn get_mut<'a>(&self, params: &'a mut ModelParams) -> &'a mut Tensor2D {
        params.layers[self.layer].linear_mut(self.kind)
    }
}

/// ⌈L/4⌉, so the quarter scopes are never empty.
pub fn quarter_layer_count(n_layers: usize) -> usize {
    n_layers.div_ceil(4)
}

/// Tensors a strategy may touch, ordered by layer then
/// q, k, v, o, up, down. Embeddings and LayerNorm vectors never appear.
pub fn prunable_scope(config: &ModelConfig, strategy: PruneStrategy) -> Vec<TensorRef> {
    let n = config.n_layers;
    let q = quarter_layer_count(n);
    let (layers, kinds): (std::ops::Range<usize>, &[LinearKind]) = match strategy {
        PruneStrategy::LayerWise | PruneStrategy::GlobalAllLinear => (0..n, &LinearKind::ALL),
        PruneStrategy::GlobalAttentionOnly => (0..n, &LinearKind::ATTENTION),
        PruneStrategy::GlobalFirstQuarterLayers => (0..q.min(n), &LinearKind::ALL),
        PruneStrategy::GlobalLastQuarterLayers => (n.saturating_sub(q)..n, &LinearKind::ALL),
    };
    layers
        .flat_map(|layer| kinds.iter().map(move |&kind| TensorRef { layer, kind }))
        .collect()
}

/// Result of ranking a flat list by magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeCut {
    /// Magnitude of the last dropped entry; 0 when nothing is dropped.
    pub threshold: f64,
    /// ⌊fraction · N⌋.
    pub drop_count: usize,
}

pub fn drop_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor() as usize).min(n)
}

fn magnitude_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b))
}

/// Flat indices of the ⌊fraction · N⌋ entries that come first in
/// `(|value|, index)` order, returned ascending by index.
pub fn select_drops(values: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::degenerate("cannot rank an empty scope"));
    }
    let k = drop_count(fraction, values.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order(values, a, b));
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Threshold magnitude and drop count for a flat list of weights.
pub fn magnitude_threshold(values: &[f64], fraction: f64) -> Result<MagnitudeCut> {
    let drops = select_drops(values, fraction)?;
    let threshold = drops
        .iter()
        .map(|&i| values[i].abs())
        .fold(0.0, f64::max);
    Ok(MagnitudeCut {
        threshold,
        drop_count: drops.len(),
    })
}

/// Keep/drop map for one tensor; `true` means the weight survives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMask {
    pub tensor: TensorRef,
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl TensorMask {
    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub tensors: Vec<TensorMask>,
}

impl SparsityMask {
    /// Zeroes every dropped position. Applying twice changes nothing more.
    pub fn apply(&self, params: &mut ModelParams) -> Result<()> {
        for m in &self.tensors {
            if m.tensor.layer >= params.layers.len() {
                return Err(Error::config(format!("mask names missing tensor {}", m.tensor.name())));
            }
            let t = m.tensor.get_mut(params);
            if t.shape() != (m.rows, m.cols) || m.keep.len() != t.len() {
                return Err(Error::config(format!(
                    "mask for {} has shape {}x{}, tensor is {:?}",
                    m.tensor.name(),
                    m.rows,
                    m.cols,
                    t.shape()
                )));
            }
            for (w, keep) in t.as_mut_slice().iter_mut().zip(&m.keep) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn dropped(&self) -> usize {
        self.tensors.iter().map(TensorMask::dropped).sum()
    }

    pub fn size(&self) -> usize {
        self.tensors.iter().map(|m| m.keep.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub size: usize,
    pub zeros: usize,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    pub scope_size: usize,
    pub scope_zeros: usize,
    pub scope_zero_fraction: f64,
    /// Over every parameter of the model, embeddings and norms included.
    pub global_size: usize,
    pub global_zeros: usize,
    pub global_zero_fraction: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact zero counts for the scope and for the whole model.
pub fn sparsity_report(params: &ModelParams, scope: &[TensorRef]) -> SparsityReport {
    let tensors: Vec<TensorSparsity> = scope
        .iter()
        .map(|r| {
            let t = r.get(params);
            let zeros = t.count_zeros();
            TensorSparsity {
                name: r.name(),
                size: t.len(),
                zeros,
                zero_fraction: ratio(zeros, t.len()),
            }
        })
        .collect();
    let scope_size = tensors.iter().map(|t| t.size).sum();
    let scope_zeros = tensors.iter().map(|t| t.zeros).sum();
    let all = params.named_tensors();
    let global_size = all.iter().map(|(_, t)| t.len()).sum();
    let global_zeros = all.iter().map(|(_, t)| t.count_zeros()).sum();
    SparsityReport {
        tensors,
        scope_size,
        scope_zeros,
        scope_zero_fraction: ratio(scope_zeros, scope_size),
        global_size,
        global_zeros,
        global_zero_fraction: ratio(global_zeros, global_size),
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub params: ModelParams,
    pub mask: SparsityMask,
    pub report: SparsityReport,
}

/// Pure pruning transformation; `params` is left untouched.
pub fn prune(params: &ModelParams, spec: &PruneSpec) -> Result<PruneOutcome> {
    spec.validate()?;
    let scope = prunable_scope(&params.config, spec.strategy);
    if scope.is_empty() {
        return Err(Error::degenerate("strategy selects no tensors"));
    }

    let keeps: Vec<Vec<bool>> = if spec.strategy.is_global() {
        let sizes: Vec<usize> = scope.iter().map(|r| r.get(params).len()).collect();
        let flat: Vec<f64> = scope
            .iter()
            .flat_map(|r| r.get(params).as_slice().iter().copied())
            .collect();
        let mut keep = vec![true; flat.len()];
        for i in select_drops(&flat, spec.fraction)? {
            keep[i] = false;
        }
        let mut out = Vec::with_capacity(scope.len());
        let mut rest = keep.as_slice();
        for n in sizes {
            let (head, tail) = rest.split_at(n);
            out.push(head.to_vec());
            rest = tail;
        }
        out
    } else {
        scope
            .par_iter()
            .map(|r| {
                let values = r.get(params).as_slice();
                let mut keep = vec![true; values.len()];
                for i in select_drops(values, spec.fraction)? {
                    keep[i] = false;
                }
                Ok(keep)
            })
            .collect::<Result<_>>()?
    };

    let mask = SparsityMask {
        tensors: scope
            .iter()
            .zip(keeps)
            .map(|(r, keep)| {
                let t = r.get(params);
                TensorMask {
                    tensor: *r,
                    rows: t.rows(),
                    cols: t.cols(),
                    keep,
                }
            })
            .collect(),
    };
    let mut pruned = params.clone();
    mask.apply(&mut pruned)?;
    let report = sparsity_report(&pruned, &scope);
    Ok(PruneOutcome {
        params: pruned,
        mask,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskManifest {
    format: String,
    strategy: PruneStrategy,
    fraction: f64,
    payload: String,
    tensors: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    layer: usize,
    kind: LinearKind,
    rows: usize,
    cols: usize,
    byte_offset: usize,
    byte_len: usize,
    kept: usize,
}

const MASK_FORMAT: &str = "prunemem-mask-v1";

fn pack_bits(keep: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; keep.len().div_ceil(8)];
    for (i, k) in keep.iter().enumerate() {
        if *k {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Writes `<json_path>` (manifest) and `<bin_path>` (bit-packed payload,
/// LSB first, 1 = kept, each tensor starting on a byte boundary).
pub fn write_mask(json_path: &Path, bin_path: &Path, spec: &PruneSpec, mask: &SparsityMask) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(mask.tensors.len());
    for m in &mask.tensors {
        let packed = pack_bits(&m.keep);
        entries.push(MaskEntry {
            name: m.tensor.name(),
            layer: m.tensor.layer,
            kind: m.tensor.kind,
            rows: m.rows,
            cols: m.cols,
            byte_offset: payload.len(),
            byte_len: packed.len(),
            kept: m.keep.len() - m.dropped(),
        });
        payload.extend_from_slice(&packed);
    }
    let manifest = MaskManifest {
        format: MASK_FORMAT.to_string(),
        strategy: spec.strategy,
        fraction: spec.fraction,
        payload: bin_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    let mut w = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    std::fs::write(bin_path, payload)?;
    Ok(())
}

pub fn read_mask(json_path: &Path, bin_path: &Path) -> Result<(PruneSpec, SparsityMask)> {
    let bad = |reason: String| Error::Format {
        path: json_path.to_path_buf(),
        reason,
    };
    let manifest: MaskManifest = serde_json::from_reader(File::open(json_path)?)
        .map_err(|e| bad(e.to_string()))?;
    if manifest.format != MASK_FORMAT {
        return Err(bad(format!("unknown mask format `{}`", manifest.format)));
    }
    let mut payload = Vec::new();
    File::open(bin_path)?.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n = e.rows * e.cols;
        if e.byte_len != n.div_ceil(8) || e.byte_offset + e.byte_len > payload.len() {
            return Err(bad(format!("payload range for {} is inconsistent", e.name)));
        }
        let keep = unpack_bits(&payload[e.byte_offset..e.byte_offset + e.byte_len], n);
        tensors.push(TensorMask {
            tensor: TensorRef {
                layer: e.layer,
                kind: e.kind,
            },
            rows: e.rows,
            cols: e.cols,
            keep,
        });
    }
    let spec = PruneSpec::new(manifest.strategy, manifest.fraction)?;
    Ok((spec, SparsityMask { tensors }))
}
