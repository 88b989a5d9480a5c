//! Bag records, the `GMIL` bag file format, manifests, the synthetic spatial
//! benchmark, and stratified cross-validation splits.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::simm::{GridCoord, GridLayout};
use crate::tensor::Tensor;

/// One slide: `N` instance embeddings with grid positions and a slide label.
#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub id: String,
    pub label: u8,
    pub coords: Vec<GridCoord>,
    /// `[N, C]`.
    pub features: Tensor<f32>,
}

impl BagRecord {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!("{}: label {} is not binary", self.id, self.label)));
        }
        let (n, _) = self.features.dims2("bag")?;
        if n != self.coords.len() {
            return Err(Error::shape(
                "bag",
                format!("{}: {} feature rows for {} coordinates", self.id, n, self.coords.len()),
            ));
        }
        GridLayout::new(&self.coords).map(|_| ())
    }
}

pub const BAG_MAGIC: &[u8; 4] = b"GMIL";
pub const BAG_VERSION: u8 = 1;
const HEADER_LEN: u64 = 14;

/// Serializes a bag: `"GMIL" | version u8 | label u8 | N u32 | C u32`, then
/// `N × (row u32, col u32, C × f32)`, all little-endian.
pub fn encode_bag(bag: &BagRecord) -> Result<Vec<u8>> {
    bag.validate()?;
    let (n, c) = (bag.len(), bag.feature_dim());
    let mut out = Vec::with_capacity(HEADER_LEN as usize + n * (8 + 4 * c));
    out.extend_from_slice(BAG_MAGIC);
    out.push(BAG_VERSION);
    out.push(bag.label);
    out.write_u32::<LittleEndian>(n as u32).unwrap();
    out.write_u32::<LittleEndian>(c as u32).unwrap();
    for (coord, row) in bag.coords.iter().zip(bag.features.data().chunks(c.max(1))) {
        out.write_u32::<LittleEndian>(coord.row).unwrap();
        out.write_u32::<LittleEndian>(coord.col).unwrap();
        for &v in row {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    Ok(out)
}

struct Header {
    label: u8,
    n: usize,
    c: usize,
}

impl Header {
    fn body_len(&self) -> u64 {
        (self.n as u64).saturating_mul(8 + 4 * self.c as u64)
    }
}

fn read_header(r: &mut impl Read, available: u64) -> Result<Header> {
    if available < HEADER_LEN {
        return Err(Error::Format {
            offset: available,
            msg: format!("truncated header: expected {HEADER_LEN} bytes, found {available}"),
        });
    }
    let mut magic = [0u8; 4];
    let io = |e: std::io::Error| Error::Format {
        offset: 0,
        msg: e.to_string(),
    };
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != BAG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"GMIL\"", String::from_utf8_lossy(&magic)),
        });
    }
    let version = r.read_u8().map_err(io)?;
    if version != BAG_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let label = r.read_u8().map_err(io)?;
    if label > 1 {
        return Err(Error::Format {
            offset: 5,
            msg: format!("label {label} is not binary"),
        });
    }
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let c = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if n == 0 {
        return Err(Error::Format {
            offset: 6,
            msg: "bag declares zero instances".into(),
        });
    }
    Ok(Header { label, n, c })
}

fn read_body(r: &mut impl Read, h: &Header, id: String) -> Result<BagRecord> {
    let mut coords = Vec::with_capacity(h.n);
    let mut data = vec![0f32; h.n * h.c];
    let mut offset = HEADER_LEN;
    for row in 0..h.n {
        let io = |e: std::io::Error| Error::Format {
            offset,
            msg: e.to_string(),
        };
        let r0 = r.read_u32::<LittleEndian>().map_err(io)?;
        let c0 = r.read_u32::<LittleEndian>().map_err(io)?;
        coords.push(GridCoord::new(r0, c0));
        r.read_f32_into::<LittleEndian>(&mut data[row * h.c..(row + 1) * h.c])
            .map_err(io)?;
        offset += 8 + 4 * h.c as u64;
    }
    let bag = BagRecord {
        id,
        label: h.label,
        coords,
        features: Tensor::new(vec![h.n, h.c], data)?,
    };
    bag.validate()?;
    Ok(bag)
}

fn check_length(h: &Header, actual: u64) -> Result<()> {
    let expected = HEADER_LEN.saturating_add(h.body_len());
    if actual < expected {
        return Err(Error::Format {
            offset: actual,
            msg: format!("truncated feature block: expected {expected} bytes, found {actual}"),
        });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected,
            msg: format!("{} trailing bytes after feature block", actual - expected),
        });
    }
    Ok(())
}

pub fn decode_bag(bytes: &[u8], id: impl Into<String>) -> Result<BagRecord> {
    let mut r = bytes;
    let h = read_header(&mut r, bytes.len() as u64)?;
    check_length(&h, bytes.len() as u64)?;
    read_body(&mut r, &h, id.into())
}

pub fn write_bag(path: &Path, bag: &BagRecord) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag file; the slide id is the file stem. The declared sizes are
/// checked against the file length before any feature buffer is allocated.
pub fn read_bag(path: &Path) -> Result<BagRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let h = read_header(&mut r, len)?;
    check_length(&h, len)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_body(&mut r, &h, id)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
}

/// Writes `slide_id<TAB>path<TAB>label` lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        writeln!(w, "{}\t{}\t{}", e.id, e.path.display(), e.label).map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a manifest; relative bag paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, p, label] = fields[..] else {
            return Err(Error::Config(format!(
                "{}:{}: expected slide_id<TAB>path<TAB>label",
                path.display(),
                lineno + 1
            )));
        };
        let label: u8 = label
            .trim()
            .parse()
            .ok()
            .filter(|&l| l <= 1)
            .ok_or_else(|| Error::Config(format!("{}:{}: bad label {label:?}", path.display(), lineno + 1)))?;
        let p = PathBuf::from(p);
        out.push(ManifestEntry {
            id: id.to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

/// Bags plus their precomputed grid layouts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bags: Vec<BagRecord>,
    pub layouts: Vec<GridLayout>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(bags: Vec<BagRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(bags.len());
        let mut layouts = Vec::with_capacity(bags.len());
        let dim = bags.first().map(|b| b.feature_dim());
        for (i, b) in bags.iter().enumerate() {
            b.validate()?;
            if Some(b.feature_dim()) != dim {
                return Err(Error::Config(format!(
                    "{}: feature dim {} differs from {}",
                    b.id,
                    b.feature_dim(),
                    dim.unwrap_or(0)
                )));
            }
            if by_id.insert(b.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate slide id {}", b.id)));
            }
            layouts.push(GridLayout::new(&b.coords)?);
        }
        Ok(Dataset { bags, layouts, by_id })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let mut bags = Vec::with_capacity(entries.len());
        for e in entries {
            let mut bag = read_bag(&e.path)?;
            if bag.label != e.label {
                return Err(Error::Config(format!(
                    "{}: manifest label {} disagrees with file label {}",
                    e.id, e.label, bag.label
                )));
            }
            bag.id = e.id;
            bags.push(bag);
        }
        Dataset::new(bags)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| self.index_of(id).ok_or_else(|| Error::Config(format!("unknown slide id {id}"))))
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.bags.iter().map(|b| b.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.bags.first().map_or(0, |b| b.feature_dim())
    }
}

/// Parameters of the synthetic spatial benchmark. Both classes carry the same
/// number of signal instances drawn from the same distribution; positives
/// cluster them inside one window, negatives spread them apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthTaskSpec {
    pub rows: usize,
    pub cols: usize,
    pub bag_size: usize,
    pub feature_dim: usize,
    pub signal_count: usize,
    /// Scale of the signature vector (first basis vector).
    pub signal_scale: f64,
    /// Standard deviation of the per-dimension Gaussian noise.
    pub noise: f64,
    /// Side of the window containing all positive-bag signal patches.
    pub cluster_window: usize,
    /// Minimum Chebyshev distance between negative-bag signal patches.
    pub min_distance: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            rows: 12,
            cols: 12,
            bag_size: 100,
            feature_dim: 64,
            signal_count: 4,
            signal_scale: 2.0,
            noise: 0.5,
            cluster_window: 2,
            min_distance: 4,
            seed: 0,
        }
    }
}

const MAX_RETRIES: usize = 1000;

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self;
        let fail = |m: String| Err(Error::Infeasible(m));
        if s.feature_dim == 0 || s.rows == 0 || s.cols == 0 {
            return fail("grid and feature dims must be >= 1".into());
        }
        if s.bag_size > s.rows * s.cols {
            return fail(format!("{} instances do not fit a {}x{} grid", s.bag_size, s.rows, s.cols));
        }
        if s.signal_count == 0 || s.signal_count > s.bag_size {
            return fail(format!("signal count {} must be in 1..={}", s.signal_count, s.bag_size));
        }
        if s.cluster_window == 0 || s.cluster_window > s.rows.min(s.cols) {
            return fail(format!("cluster window {} does not fit the grid", s.cluster_window));
        }
        if s.signal_count > s.cluster_window * s.cluster_window {
            return fail(format!(
                "{} signal patches cannot fit a {}x{} window",
                s.signal_count, s.cluster_window, s.cluster_window
            ));
        }
        if s.min_distance < s.cluster_window {
            return fail(format!(
                "min distance {} must be >= cluster window {}",
                s.min_distance, s.cluster_window
            ));
        }
        let per_row = s.rows.div_ceil(s.min_distance);
        let per_col = s.cols.div_ceil(s.min_distance);
        if s.signal_count > per_row * per_col {
            return fail(format!(
                "{} patches at distance >= {} cannot fit a {}x{} grid",
                s.signal_count, s.min_distance, s.rows, s.cols
            ));
        }
        if !(s.noise >= 0.0 && s.noise.is_finite() && s.signal_scale.is_finite()) {
            return fail("noise and signal scale must be finite, noise >= 0".into());
        }
        Ok(())
    }

    fn cell(&self, i: usize) -> GridCoord {
        GridCoord::new((i / self.cols) as u32, (i % self.cols) as u32)
    }

    /// Signal cells of a positive bag: inside one window whose origin is a
    /// multiple of the window size.
    fn clustered(&self, rng: &mut impl Rng) -> Vec<GridCoord> {
        let p = self.cluster_window;
        let wr = rng.gen_range(0..self.rows / p) * p;
        let wc = rng.gen_range(0..self.cols / p) * p;
        index::sample(rng, p * p, self.signal_count)
            .into_iter()
            .map(|j| GridCoord::new((wr + j / p) as u32, (wc + j % p) as u32))
            .collect()
    }

    fn spread(&self, rng: &mut impl Rng) -> Option<Vec<GridCoord>> {
        for _ in 0..MAX_RETRIES {
            let mut picked: Vec<GridCoord> = Vec::with_capacity(self.signal_count);
            for _ in 0..MAX_RETRIES {
                let c = self.cell(rng.gen_range(0..self.rows * self.cols));
                if picked.iter().all(|&q| q.chebyshev(c) as usize >= self.min_distance) {
                    picked.push(c);
                    if picked.len() == self.signal_count {
                        return Some(picked);
                    }
                }
            }
        }
        None
    }
}

/// A generated bag and the bag indices of its signal instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBag {
    pub record: BagRecord,
    pub signal: Vec<usize>,
}

fn synth_bag(spec: &SynthTaskSpec, id: String, label: u8, index_in_class: usize) -> Result<SyntheticBag> {
    let mut rng = seed::rng(spec.seed, &[label as u64, index_in_class as u64]);
    let total = spec.rows * spec.cols;
    for _ in 0..MAX_RETRIES {
        let signal = if label == 1 {
            spec.clustered(&mut rng)
        } else {
            spec.spread(&mut rng)
                .ok_or_else(|| Error::Infeasible("could not place spread signal patches".into()))?
        };
        let taken: HashSet<GridCoord> = signal.iter().copied().collect();
        let free: Vec<GridCoord> = (0..total).map(|i| spec.cell(i)).filter(|c| !taken.contains(c)).collect();
        let background: Vec<GridCoord> = index::sample(&mut rng, free.len(), spec.bag_size - spec.signal_count)
            .into_iter()
            .map(|i| free[i])
            .collect();
        let mut coords: Vec<(GridCoord, bool)> = signal
            .iter()
            .map(|&c| (c, true))
            .chain(background.into_iter().map(|c| (c, false)))
            .collect();
        // Keep the grid origin at (0,0) so cluster windows stay aligned after
        // offset normalization.
        if coords.iter().all(|(c, _)| c.row > 0) || coords.iter().all(|(c, _)| c.col > 0) {
            continue;
        }
        coords.shuffle(&mut rng);
        let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut data = Vec::with_capacity(spec.bag_size * spec.feature_dim);
        let mut signal_idx = Vec::with_capacity(spec.signal_count);
        for (i, &(_, is_signal)) in coords.iter().enumerate() {
            for d in 0..spec.feature_dim {
                let base = if is_signal && d == 0 { spec.signal_scale } else { 0.0 };
                data.push((base + noise.sample(&mut rng)) as f32);
            }
            if is_signal {
                signal_idx.push(i);
            }
        }
        return Ok(SyntheticBag {
            record: BagRecord {
                id,
                label,
                coords: coords.iter().map(|&(c, _)| c).collect(),
                features: Tensor::new(vec![spec.bag_size, spec.feature_dim], data)?,
            },
            signal: signal_idx,
        });
    }
    Err(Error::Infeasible("could not draw a bag anchored at the grid origin".into()))
}

/// Generates `per_class` bags of each label, alternating labels, with ids
/// `bag_0000`, `bag_0001`, …. Each bag depends only on the spec seed, its
/// label and its index within its class.
pub fn synthesize_bags(spec: &SynthTaskSpec, per_class: usize) -> Result<Vec<SyntheticBag>> {
    spec.validate()?;
    (0..2 * per_class)
        .map(|i| synth_bag(spec, format!("bag_{i:04}"), (i % 2) as u8, i / 2))
        .collect()
}

pub fn synthesize_dataset(spec: &SynthTaskSpec, per_class: usize) -> Result<Vec<BagRecord>> {
    Ok(synthesize_bags(spec, per_class)?.into_iter().map(|b| b.record).collect())
}

/// Writes bags under `dir/bags/` and a `dir/manifest.tsv` with relative paths.
pub fn write_dataset(dir: &Path, bags: &[BagRecord]) -> Result<PathBuf> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(bags.len());
    for b in bags {
        let rel = PathBuf::from("bags").join(format!("{}.gmil", b.id));
        write_bag(&dir.join(&rel), b)?;
        entries.push(ManifestEntry {
            id: b.id.clone(),
            path: rel,
            label: b.label,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified `k`-fold split. Members of each class are shuffled and dealt
/// round-robin to folds (continuing the deal across classes so fold sizes
/// differ by at most one). Within each fold's non-test part, a stratified
/// `val_fraction` of every class is held out for validation.
pub fn stratified_kfold(ids: &[String], labels: &[u8], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if ids.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val fraction {val_fraction} not in [0, 1)")));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut fold_of = vec![0usize; ids.len()];
    let mut dealt = 0usize;
    for &class in &classes {
        let mut members: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Degenerate(format!(
                "class {} has {} members, fewer than {} folds",
                class,
                members.len(),
                k
            )));
        }
        members.shuffle(&mut seed::rng(seed, &[u64::from(class)]));
        for i in members {
            fold_of[i] = dealt % k;
            dealt += 1;
        }
    }
    let mut splits = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<String> = (0..ids.len()).filter(|&i| fold_of[i] == fold).map(|i| ids[i].clone()).collect();
        let mut val_set = HashSet::new();
        for &class in &classes {
            let mut rest: Vec<usize> = (0..ids.len())
                .filter(|&i| fold_of[i] != fold && labels[i] == class)
                .collect();
            let mut n_val = (val_fraction * rest.len() as f64).round() as usize;
            if val_fraction > 0.0 && n_val == 0 && rest.len() >= 2 {
                n_val = 1;
            }
            rest.shuffle(&mut seed::rng(seed, &[1000 + fold as u64, u64::from(class)]));
            val_set.extend(rest.into_iter().take(n_val));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for i in (0..ids.len()).filter(|&i| fold_of[i] != fold) {
            if val_set.contains(&i) {
                val.push(ids[i].clone());
            } else {
                train.push(ids[i].clone());
            }
        }
        splits.push(FoldSplit { fold, train, val, test });
    }
    Ok(splits)
}
