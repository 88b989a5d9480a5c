//! Spatial information mixing.
//!
//! Bag embeddings `[N, C]` are scattered onto the slide's patch grid
//! `[W, H, C]`, zero-padded at the bottom/right, partitioned into either
//! contiguous `P×P` windows (block) or a dilated `G×G` pattern (grid), mixed
//! along the spatial positions by one linear map shared by every window and
//! channel, folded back, and gathered into bag order with a residual
//! connection.
//!
//! Unoccupied and padded cells are plain zeros during mixing; their outputs
//! are dropped by the gather.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, InitScheme, Linear};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Patch position on the slide grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCoord {
    pub row: u32,
    pub col: u32,
}

impl GridCoord {
    pub fn new(row: u32, col: u32) -> Self {
        GridCoord { row, col }
    }

    pub fn chebyshev(self, other: GridCoord) -> u32 {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

/// Tight bounding box of a bag's coordinates and each instance's cell in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub origin: GridCoord,
    /// `(row, col)` of bag instance `i`, relative to `origin`.
    pub cells: Vec<(usize, usize)>,
}

impl GridLayout {
    pub fn new(coords: &[GridCoord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyBag);
        }
        let mut seen: HashMap<GridCoord, usize> = HashMap::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            if let Some(first) = seen.insert(c, i) {
                return Err(Error::DuplicateCoord {
                    row: c.row,
                    col: c.col,
                    first,
                    second: i,
                });
            }
        }
        let min_row = coords.iter().map(|c| c.row).min().unwrap_or(0);
        let min_col = coords.iter().map(|c| c.col).min().unwrap_or(0);
        let max_row = coords.iter().map(|c| c.row).max().unwrap_or(0);
        let max_col = coords.iter().map(|c| c.col).max().unwrap_or(0);
        Ok(GridLayout {
            rows: (max_row - min_row) as usize + 1,
            cols: (max_col - min_col) as usize + 1,
            origin: GridCoord::new(min_row, min_col),
            cells: coords
                .iter()
                .map(|c| ((c.row - min_row) as usize, (c.col - min_col) as usize))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Flat cell index of every instance in a grid with `cols` columns.
    pub fn flat_index(&self, cols: usize) -> Rc<[usize]> {
        self.cells.iter().map(|&(r, c)| r * cols + c).collect()
    }

    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.rows * self.cols];
        for &(r, c) in &self.cells {
            occ[r * self.cols + c] = true;
        }
        occ
    }
}

/// A bag laid out on its slide grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid<T> {
    /// `[rows, cols, channels]`.
    pub data: Tensor<T>,
    /// Row-major `rows × cols` mask of occupied cells.
    pub occupancy: Vec<bool>,
    pub layout: GridLayout,
}

/// Places each embedding at its grid cell; unoccupied cells are zero.
pub fn scatter<T: Scalar>(features: &Tensor<T>, coords: &[GridCoord]) -> Result<SpatialGrid<T>> {
    let (n, c) = features.dims2("scatter")?;
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if coords.len() != n {
        return Err(Error::shape(
            "scatter",
            format!("{} coordinates for {} embeddings", coords.len(), n),
        ));
    }
    let layout = GridLayout::new(coords)?;
    let data = features
        .scatter_rows(&layout.flat_index(layout.cols), layout.rows * layout.cols)?
        .into_shape(&[layout.rows, layout.cols, c])?;
    Ok(SpatialGrid {
        occupancy: layout.occupancy(),
        data,
        layout,
    })
}

/// Reads embeddings back in bag order, discarding every other cell.
pub fn gather<T: Scalar>(grid: &SpatialGrid<T>) -> Result<Tensor<T>> {
    let (rows, cols, c) = grid.data.dims3("gather")?;
    if rows != grid.layout.rows || cols != grid.layout.cols {
        return Err(Error::shape(
            "gather",
            format!(
                "grid data {:?} disagrees with layout {}x{}",
                grid.data.shape(),
                grid.layout.rows,
                grid.layout.cols
            ),
        ));
    }
    grid.data
        .reshape(&[rows * cols, c])?
        .gather_rows(&grid.layout.flat_index(cols))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixKind {
    /// Contiguous `P×P` windows; mixing along the intra-window axis.
    Block,
    /// Dilated `G×G` pattern; mixing along the pattern axis.
    Grid,
}

/// Which axis of a `[A, B, C]` partition the token mixer acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixAxis {
    First,
    Second,
}

impl MixKind {
    pub fn mix_axis(self) -> MixAxis {
        match self {
            MixKind::Block => MixAxis::Second,
            MixKind::Grid => MixAxis::First,
        }
    }
}

/// Shapes for one partition of a `rows × cols × channels` grid.
///
/// Block: `[Ŵ/P, Ĥ/P]` windows in row-major order, each holding `P·P`
/// positions in row-major order, giving `[(Ŵ/P)(Ĥ/P), P·P, C]`.
///
/// Grid: cell `(r, c)` with `r = a·(Ŵ/G) + b` and `c = a'·(Ĥ/G) + b'` goes to
/// pattern position `a·G + a'` and group `b·(Ĥ/G) + b'`, giving
/// `[G·G, (Ŵ/G)(Ĥ/G), C]`. Members of one group are `Ŵ/G` rows apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub kind: MixKind,
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub channels: usize,
}

// Swapping axes 1 and 2 of the 5-d split is its own inverse.
const SPLIT_AXES: [usize; 5] = [0, 2, 1, 3, 4];

impl PartitionPlan {
    pub fn new(kind: MixKind, size: usize, rows: usize, cols: usize, channels: usize) -> Result<Self> {
        if size < 1 {
            return Err(Error::InvalidArgument(format!("{kind:?} size must be >= 1")));
        }
        Ok(PartitionPlan {
            kind,
            size,
            rows,
            cols,
            padded_rows: rows.div_ceil(size) * size,
            padded_cols: cols.div_ceil(size) * size,
            channels,
        })
    }

    fn split_shape(&self) -> [usize; 5] {
        let (s, c) = (self.size, self.channels);
        let (hr, hc) = (self.padded_rows / s, self.padded_cols / s);
        match self.kind {
            MixKind::Block => [hr, s, hc, s, c],
            MixKind::Grid => [s, hr, s, hc, c],
        }
    }

    fn merged_shape(&self) -> [usize; 5] {
        let [a, b, c, d, e] = self.split_shape();
        [a, c, b, d, e]
    }

    /// `[A, B, C]` shape of the partitioned tensor.
    pub fn partitioned_shape(&self) -> [usize; 3] {
        let [a, b, c, d, e] = self.merged_shape();
        [a * b, c * d, e]
    }

    /// Extent of the axis the mixer acts on (`P·P` or `G·G`).
    pub fn mix_len(&self) -> usize {
        self.size * self.size
    }

    /// `(first-axis, second-axis)` position of padded-grid cell `(r, c)`.
    pub fn locate(&self, r: usize, c: usize) -> (usize, usize) {
        let s = self.size;
        let (hr, hc) = (self.padded_rows / s, self.padded_cols / s);
        match self.kind {
            MixKind::Block => ((r / s) * hc + c / s, (r % s) * s + c % s),
            MixKind::Grid => ((r / hr) * s + c / hc, (r % hr) * hc + c % hc),
        }
    }

    /// Pads a `[rows, cols, C]` grid and partitions it.
    pub fn partition<T: Scalar>(&self, grid: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_grid(grid.shape())?;
        grid.pad2d(self.padded_rows - self.rows, self.padded_cols - self.cols)?
            .into_shape(&self.split_shape())?
            .permute(&SPLIT_AXES)?
            .into_shape(&self.partitioned_shape())
    }

    /// Restores the padded `[Ŵ, Ĥ, C]` grid from its partition.
    pub fn unpartition<T: Scalar>(&self, parts: &Tensor<T>) -> Result<Tensor<T>> {
        if parts.shape() != self.partitioned_shape() {
            return Err(Error::Dimension {
                op: "unpartition",
                lhs: parts.shape().to_vec(),
                rhs: self.partitioned_shape().to_vec(),
            });
        }
        parts
            .reshape(&self.merged_shape())?
            .permute(&SPLIT_AXES)?
            .into_shape(&[self.padded_rows, self.padded_cols, self.channels])
    }

    fn check_grid(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.rows, self.cols, self.channels] {
            return Err(Error::Dimension {
                op: "partition",
                lhs: shape.to_vec(),
                rhs: vec![self.rows, self.cols, self.channels],
            });
        }
        Ok(())
    }

    fn partition_var<T: Scalar>(&self, tape: &mut Tape<T>, grid: Var) -> Result<Var> {
        self.check_grid(tape.shape(grid))?;
        let x = tape.pad2d(grid, self.padded_rows - self.rows, self.padded_cols - self.cols)?;
        let x = tape.reshape(x, &self.split_shape())?;
        let x = tape.permute(x, &SPLIT_AXES)?;
        tape.reshape(x, &self.partitioned_shape())
    }

    fn unpartition_var<T: Scalar>(&self, tape: &mut Tape<T>, parts: Var) -> Result<Var> {
        let x = tape.reshape(parts, &self.merged_shape())?;
        let x = tape.permute(x, &SPLIT_AXES)?;
        tape.reshape(x, &[self.padded_rows, self.padded_cols, self.channels])
    }
}

/// Pads and partitions a grid into `P×P` windows: `[(Ĥ/P)(Ŵ/P), P·P, C]`.
pub fn block_partition<T: Scalar>(grid: &Tensor<T>, p: usize) -> Result<(Tensor<T>, PartitionPlan)> {
    let (r, c, ch) = grid.dims3("block_partition")?;
    let plan = PartitionPlan::new(MixKind::Block, p, r, c, ch)?;
    Ok((plan.partition(grid)?, plan))
}

/// Pads and partitions a grid by a `G×G` dilated pattern: `[G·G, (Ĥ/G)(Ŵ/G), C]`.
pub fn grid_partition<T: Scalar>(grid: &Tensor<T>, g: usize) -> Result<(Tensor<T>, PartitionPlan)> {
    let (r, c, ch) = grid.dims3("grid_partition")?;
    let plan = PartitionPlan::new(MixKind::Grid, g, r, c, ch)?;
    Ok((plan.partition(grid)?, plan))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SimmVariant {
    #[default]
    None,
    Block,
    Grid,
    Both,
}

impl SimmVariant {
    pub const ALL: [SimmVariant; 4] = [SimmVariant::None, SimmVariant::Block, SimmVariant::Grid, SimmVariant::Both];

    pub fn uses_block(self) -> bool {
        matches!(self, SimmVariant::Block | SimmVariant::Both)
    }

    pub fn uses_grid(self) -> bool {
        matches!(self, SimmVariant::Grid | SimmVariant::Both)
    }
}

impl fmt::Display for SimmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimmVariant::None => "NONE",
            SimmVariant::Block => "BLOCK",
            SimmVariant::Grid => "GRID",
            SimmVariant::Both => "BOTH",
        })
    }
}

impl FromStr for SimmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" | "ABMIL" => Ok(SimmVariant::None),
            "BLOCK" => Ok(SimmVariant::Block),
            "GRID" => Ok(SimmVariant::Grid),
            "BOTH" => Ok(SimmVariant::Both),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}, expected NONE, BLOCK, GRID or BOTH"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimmConfig {
    pub variant: SimmVariant,
    /// Block window size `P`.
    pub window: usize,
    /// Grid pattern size `G`.
    pub grid: usize,
    /// Hidden width multiplier of the token mixer; 1 means a single linear map.
    pub expansion: usize,
}

impl Default for SimmConfig {
    fn default() -> Self {
        SimmConfig {
            variant: SimmVariant::Block,
            window: 2,
            grid: 2,
            expansion: 1,
        }
    }
}

/// Window sizes outside this range are accepted but logged.
pub const SWEEP_RANGE: std::ops::RangeInclusive<usize> = 1..=10;

impl SimmConfig {
    pub fn none() -> Self {
        SimmConfig {
            variant: SimmVariant::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.grid < 1 {
            return Err(Error::Config(format!(
                "window ({}) and grid ({}) sizes must be >= 1",
                self.window, self.grid
            )));
        }
        if self.expansion < 1 {
            return Err(Error::Config("mixer expansion must be >= 1".into()));
        }
        if self.out_of_sweep_range() {
            log::warn!(
                "window/grid size {}/{} outside the usual 1..=10 sweep range",
                self.window,
                self.grid
            );
        }
        Ok(())
    }

    pub fn out_of_sweep_range(&self) -> bool {
        (self.variant.uses_block() && !SWEEP_RANGE.contains(&self.window))
            || (self.variant.uses_grid() && !SWEEP_RANGE.contains(&self.grid))
    }

    /// Short label such as `BLOCK_3` or `NONE`.
    pub fn label(&self) -> String {
        match self.variant {
            SimmVariant::None => "NONE".into(),
            SimmVariant::Block => format!("BLOCK_{}", self.window),
            SimmVariant::Grid => format!("GRID_{}", self.grid),
            SimmVariant::Both if self.window == self.grid => format!("BOTH_{}", self.window),
            SimmVariant::Both => format!("BOTH_{}_{}", self.window, self.grid),
        }
    }
}

/// Linear map over the `P·P` (or `G·G`) spatial positions, shared across all
/// windows and channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMixer {
    pub size: usize,
    pub layers: Vec<Linear>,
}

impl TokenMixer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        size: usize,
        expansion: usize,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        let layers = if expansion <= 1 {
            vec![Linear::init(store, name, size, size, true, None, seed, scheme)?]
        } else {
            let hidden = size * expansion;
            vec![
                Linear::init(
                    store,
                    &format!("{name}.0"),
                    size,
                    hidden,
                    true,
                    Some(Activation::Relu),
                    seed::derive(seed, &[0]),
                    scheme,
                )?,
                Linear::init(
                    store,
                    &format!("{name}.1"),
                    hidden,
                    size,
                    true,
                    None,
                    seed::derive(seed, &[1]),
                    scheme,
                )?,
            ]
        };
        Ok(TokenMixer { size, layers })
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for l in &self.layers {
            l.zero(store);
        }
    }

    /// Maps each row of `[rows, size]` through the mixer.
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, store, h))
    }
}

/// Applies `mixer` along one axis of a `[A, B, C]` partition on the tape.
pub fn mix_var<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    parts: Var,
    mixer: &TokenMixer,
    axis: MixAxis,
) -> Result<Var> {
    let [a, b, c] = match tape.shape(parts) {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape("mix", format!("expected [A, B, C], got {s:?}"))),
    };
    let (len, to_last, back, other) = match axis {
        MixAxis::First => (a, [1, 2, 0], [2, 0, 1], b),
        MixAxis::Second => (b, [0, 2, 1], [0, 2, 1], a),
    };
    if len != mixer.size {
        return Err(Error::shape(
            "mix",
            format!("mixer of size {} applied to axis of length {}", mixer.size, len),
        ));
    }
    let x = tape.permute(parts, &to_last)?;
    let x = tape.reshape(x, &[other * c, len])?;
    let y = mixer.apply(tape, store, x)?;
    let y = tape.reshape(y, &[other, c, len])?;
    tape.permute(y, &back)
}

/// Applies `mixer` along one axis of a `[A, B, C]` partition.
pub fn mix<T: Scalar>(parts: &Tensor<T>, mixer: &TokenMixer, store: &ParamStore<T>, axis: MixAxis) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(parts.clone());
    let y = mix_var(&mut tape, store, x, mixer, axis)?;
    Ok(tape.value(y).clone())
}

/// The trainable part of the mixing module.
#[derive(Clone, Debug, PartialEq)]
pub struct Simm {
    pub config: SimmConfig,
    pub block: Option<TokenMixer>,
    pub grid: Option<TokenMixer>,
}

/// Intermediate results of one forward pass through the module.
#[derive(Clone, Copy, Debug)]
pub struct SimmTrace {
    /// Module input `[N, C]`.
    pub input: Var,
    /// Output after every stage and its residual `[N, C]`.
    pub output: Var,
    /// Total MACs spent in mixing matmuls.
    pub mixer_macs: u64,
}

impl Simm {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        config: SimmConfig,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        config.validate()?;
        let v = config.variant;
        let block = v
            .uses_block()
            .then(|| {
                TokenMixer::init(
                    store,
                    "simm.block",
                    config.window * config.window,
                    config.expansion,
                    seed::derive(seed, &[1]),
                    scheme,
                )
            })
            .transpose()?;
        let grid = v
            .uses_grid()
            .then(|| {
                TokenMixer::init(
                    store,
                    "simm.grid",
                    config.grid * config.grid,
                    config.expansion,
                    seed::derive(seed, &[2]),
                    scheme,
                )
            })
            .transpose()?;
        Ok(Simm { config, block, grid })
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for m in self.block.iter().chain(&self.grid) {
            m.zero(store);
        }
    }

    /// One residual stage: scatter, pad, partition, mix, fold back, gather, add.
    fn stage<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &GridLayout,
        kind: MixKind,
        mixer: &TokenMixer,
    ) -> Result<Var> {
        let c = tape.shape(x)[1];
        let size = match kind {
            MixKind::Block => self.config.window,
            MixKind::Grid => self.config.grid,
        };
        let plan = PartitionPlan::new(kind, size, layout.rows, layout.cols, c)?;
        let grid = tape.scatter_rows(x, layout.flat_index(layout.cols), layout.rows * layout.cols)?;
        let grid = tape.reshape(grid, &[layout.rows, layout.cols, c])?;
        let parts = plan.partition_var(tape, grid)?;
        let mixed = mix_var(tape, store, parts, mixer, kind.mix_axis())?;
        let padded = plan.unpartition_var(tape, mixed)?;
        let flat = tape.reshape(padded, &[plan.padded_rows * plan.padded_cols, c])?;
        let back = tape.gather_rows(flat, layout.flat_index(plan.padded_cols))?;
        tape.add(x, back)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &GridLayout,
    ) -> Result<SimmTrace> {
        let n = tape.shape(x)[0];
        if n != layout.len() {
            return Err(Error::shape(
                "simm",
                format!("{} embeddings but {} coordinates", n, layout.len()),
            ));
        }
        let before = tape.mac_count();
        let mut h = x;
        if let Some(m) = &self.block {
            h = self.stage(tape, store, h, layout, MixKind::Block, m)?;
        }
        if let Some(m) = &self.grid {
            h = self.stage(tape, store, h, layout, MixKind::Grid, m)?;
        }
        Ok(SimmTrace {
            input: x,
            output: h,
            mixer_macs: tape.mac_count() - before,
        })
    }
}

/// Runs the module on plain tensors.
pub fn simm_forward<T: Scalar>(
    features: &Tensor<T>,
    coords: &[GridCoord],
    simm: &Simm,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let layout = GridLayout::new(coords)?;
    let mut tape = Tape::new();
    let x = tape.input(features.clone());
    let trace = simm.forward(&mut tape, store, x, &layout)?;
    Ok(tape.value(trace.output).clone())
}
