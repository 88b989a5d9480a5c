//! Analytic multiply-accumulate counts.
//!
//! One MAC is counted as one FLOP; bias additions, activations, softmax and
//! normalizations are not counted. Counts cover exactly the matrix products
//! the model performs, so they can be checked against [`Tape::mac_count`].
//!
//! [`Tape::mac_count`]: crate::autodiff::Tape::mac_count

use std::fmt;

use crate::error::{Error, Result};
use crate::model::GabmilConfig;
use crate::simm::{SimmConfig, SimmVariant};

/// `batch · in · out`.
pub fn linear_cost(batch: u64, in_dim: u64, out_dim: u64) -> u64 {
    batch * in_dim * out_dim
}

/// How mixer cost scales with the slide grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccountingMode {
    /// Only occupied cells are charged: `N / size²` effective windows.
    #[default]
    OccupiedOnly,
    /// Every window of the zero-padded grid is charged, as executed.
    PaddedGrid,
}

impl fmt::Display for AccountingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccountingMode::OccupiedOnly => "occupied-only",
            AccountingMode::PaddedGrid => "padded-grid",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub compression: u64,
    /// Attention projections and score vector.
    pub attention: u64,
    /// Attention-weighted sum of embeddings.
    pub pooling: u64,
    pub classifier: u64,
    pub block_mixer: u64,
    pub grid_mixer: u64,
    pub self_attention: u64,
    pub mode: AccountingMode,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.compression
            + self.attention
            + self.pooling
            + self.classifier
            + self.block_mixer
            + self.grid_mixer
            + self.self_attention
    }

    pub fn mixer(&self) -> u64 {
        self.block_mixer + self.grid_mixer
    }

    /// Component-wise sum; the accounting mode of `self` is kept.
    pub fn plus(&self, other: &CostBreakdown) -> CostBreakdown {
        CostBreakdown {
            compression: self.compression + other.compression,
            attention: self.attention + other.attention,
            pooling: self.pooling + other.pooling,
            classifier: self.classifier + other.classifier,
            block_mixer: self.block_mixer + other.block_mixer,
            grid_mixer: self.grid_mixer + other.grid_mixer,
            self_attention: self.self_attention + other.self_attention,
            mode: self.mode,
        }
    }

    fn fields(&self) -> [(&'static str, u64); 8] {
        [
            ("compression", self.compression),
            ("attention", self.attention),
            ("pooling", self.pooling),
            ("classifier", self.classifier),
            ("block_mixer", self.block_mixer),
            ("grid_mixer", self.grid_mixer),
            ("self_attention", self.self_attention),
            ("total", self.total()),
        ]
    }

    /// `key=value` lines, one per component plus `mode` and `total`.
    pub fn to_kv(&self) -> String {
        let mut out = format!("mode={}\n", self.mode);
        for (k, v) in self.fields() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// `12345678` → `12.35M`.
pub fn human(count: u64) -> String {
    let c = count as f64;
    if c >= 1e9 {
        format!("{:.2}G", c / 1e9)
    } else if c >= 1e6 {
        format!("{:.2}M", c / 1e6)
    } else if c >= 1e3 {
        format!("{:.2}K", c / 1e3)
    } else {
        count.to_string()
    }
}

impl fmt::Display for CostBreakdown {
    /// Aligned table of MACs (FLOPs = MACs).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accounting: {} (FLOPs = MACs)", self.mode)?;
        for (k, v) in self.fields() {
            writeln!(f, "  {k:<15}{v:>15}  {:>9}", human(v))?;
        }
        Ok(())
    }
}

/// Compression, attention pooling and classifier for a bag of `n` instances.
pub fn abmil_cost(n: usize, config: &GabmilConfig) -> Result<CostBreakdown> {
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    config.validate()?;
    let (n, din, dc, da, k) = (
        n as u64,
        config.input_dim as u64,
        config.compressed_dim as u64,
        config.attention_dim as u64,
        config.num_classes as u64,
    );
    let projections = if config.gated { 2 } else { 1 };
    Ok(CostBreakdown {
        compression: linear_cost(n, din, dc),
        attention: projections * linear_cost(n, dc, da) + linear_cost(n, da, 1),
        pooling: linear_cost(1, n, dc),
        classifier: linear_cost(1, dc, k),
        ..CostBreakdown::default()
    })
}

/// MACs one token-mixer application spends per channel vector.
fn mixer_macs_per_vector(size: u64, expansion: u64) -> u64 {
    let len = size * size;
    if expansion <= 1 {
        len * len
    } else {
        2 * len * len * expansion
    }
}

fn stage_cost(n: u64, rows: usize, cols: usize, size: usize, channels: u64, expansion: u64, mode: AccountingMode) -> u64 {
    let per = mixer_macs_per_vector(size as u64, expansion);
    let len = (size * size) as u64;
    match mode {
        // `N / size²` effective windows; exact because each costs `size²·per/size²`.
        AccountingMode::OccupiedOnly => n * channels * per / len,
        AccountingMode::PaddedGrid => {
            let cells = (rows.div_ceil(size) * size * cols.div_ceil(size) * size) as u64;
            cells / len * channels * per
        }
    }
}

/// Cost added by the mixing module for `n` instances on a `rows × cols`
/// grid with `channels` embedding channels.
pub fn simm_cost(
    n: usize,
    rows: usize,
    cols: usize,
    config: &SimmConfig,
    channels: usize,
    mode: AccountingMode,
) -> Result<CostBreakdown> {
    config.validate()?;
    if n > rows * cols {
        return Err(Error::InvalidArgument(format!("{n} instances do not fit a {rows}x{cols} grid")));
    }
    let (n, c, e) = (n as u64, channels as u64, config.expansion as u64);
    let mut cost = CostBreakdown {
        mode,
        ..CostBreakdown::default()
    };
    if config.variant.uses_block() {
        cost.block_mixer = stage_cost(n, rows, cols, config.window, c, e, mode);
    }
    if config.variant.uses_grid() {
        cost.grid_mixer = stage_cost(n, rows, cols, config.grid, c, e, mode);
    }
    Ok(cost)
}

/// Smallest square grid side that holds `n` cells.
pub fn square_extent(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    s.max(1)
}

/// Full model cost on a bag of `n` instances laid out on `rows × cols`.
pub fn gabmil_cost(n: usize, rows: usize, cols: usize, config: &GabmilConfig, mode: AccountingMode) -> Result<CostBreakdown> {
    let mut base = abmil_cost(n, config)?;
    base.mode = mode;
    if config.simm.variant == SimmVariant::None {
        return Ok(base);
    }
    let simm = simm_cost(n, rows, cols, &config.simm, config.compressed_dim, mode)?;
    Ok(base.plus(&simm))
}

/// A transformer aggregator of the TransMIL kind, cost-modelled only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfAttentionConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub class_token: bool,
    /// Sequences are zero-padded up to a multiple of this length before
    /// attention (the landmark count of Nyström attention); 1 disables.
    pub pad_multiple: usize,
    /// Depthwise convolution kernels of the positional encoding block, run
    /// on the smallest square grid holding the instances.
    pub ppeg_kernels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for SelfAttentionConfig {
    fn default() -> Self {
        SelfAttentionConfig {
            input_dim: 1024,
            dim: 512,
            layers: 2,
            class_token: true,
            pad_multiple: 256,
            ppeg_kernels: vec![7, 5, 3],
            num_classes: 2,
        }
    }
}

/// Per-layer cost at sequence length `n`: QKV `3nD²`, scores `n²D`, values
/// `n²D`, output projection `nD²`.
pub fn attention_layer_cost(n: u64, dim: u64) -> u64 {
    3 * n * dim * dim + 2 * n * n * dim + n * dim * dim
}

/// Smallest sequence length at which the quadratic part of a layer is at
/// least its linear part (`n = 2D`).
pub fn quadratic_crossover(dim: u64) -> u64 {
    2 * dim
}

/// Self-attention aggregator cost for `n` instances: input projection,
/// attention layers, positional convolutions, classifier.
pub fn self_attention_cost(n: usize, config: &SelfAttentionConfig) -> Result<CostBreakdown> {
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if config.dim == 0 || config.layers == 0 || config.pad_multiple == 0 || config.input_dim == 0 {
        return Err(Error::Config("self-attention dims must be >= 1".into()));
    }
    let d = config.dim as u64;
    let side = square_extent(n) as u64;
    let tokens = side * side + u64::from(config.class_token);
    let m = config.pad_multiple as u64;
    let seq = tokens.div_ceil(m) * m;
    let ppeg: u64 = config.ppeg_kernels.iter().map(|&k| side * side * d * (k * k) as u64).sum();
    Ok(CostBreakdown {
        compression: linear_cost(n as u64, config.input_dim as u64, d),
        self_attention: config.layers as u64 * attention_layer_cost(seq, d) + ppeg,
        classifier: linear_cost(1, d, config.num_classes as u64),
        ..CostBreakdown::default()
    })
}
