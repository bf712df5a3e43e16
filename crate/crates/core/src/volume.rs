//! Anisotropic voxel volumes: storage, chunked streaming and stitching.
//!
//! Elements are stored x-fastest: `index = x + dims.x * (y + dims.y * z)`.
//! On disk a volume is a raw little-endian element array (`.vol`) plus a JSON
//! sidecar describing `{dims, dtype, resolution_nm, kind}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unknown element type `{0}`")]
    UnknownDtype(String),
    #[error("dimensions must be positive, got {0:?}")]
    NonPositiveDims([usize; 3]),
    #[error("resolution must be strictly positive, got {0:?}")]
    InvalidResolution([f64; 3]),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("element type {dtype} is not valid for kind {kind:?}")]
    DtypeKind { dtype: Dtype, kind: VolumeKind },
    #[error("expected a {expected} volume, got {actual:?}")]
    KindMismatch { expected: &'static str, actual: VolumeKind },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("core size must be at least 1 on every axis, got {0:?}")]
    ZeroCoreSize([usize; 3]),
    #[error("no result for chunk {0}")]
    MissingChunk(usize),
    #[error("chunk index {0} is not part of the plan")]
    UnknownChunk(usize),
    #[error("downsampling factor must be >= 1")]
    ZeroFactor,
    #[error("label volumes cannot be averaged")]
    LabelsNotAveraged,
    #[error("empty output path")]
    EmptyPath,
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// What the voxels of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Raw,
    Probability,
    Labels,
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    U32,
    U64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U32 => 4,
            Dtype::U64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U32 => "u32",
            Dtype::U64 => "u64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" | "uint8" => Ok(Dtype::U8),
            "u32" | "uint32" => Ok(Dtype::U32),
            "u64" | "uint64" => Ok(Dtype::U64),
            other => Err(VolumeError::UnknownDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense element storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoxelData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::U32(v) => v.len(),
            VoxelData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::U32(_) => Dtype::U32,
            VoxelData::U64(_) => Dtype::U64,
        }
    }

    fn zeros_like(&self, n: usize) -> VoxelData {
        match self {
            VoxelData::U8(_) => VoxelData::U8(vec![0; n]),
            VoxelData::U32(_) => VoxelData::U32(vec![0; n]),
            VoxelData::U64(_) => VoxelData::U64(vec![0; n]),
        }
    }

    fn copy_from(&mut self, dst: usize, src: &VoxelData, at: usize, n: usize) {
        match (self, src) {
            (VoxelData::U8(d), VoxelData::U8(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            (VoxelData::U32(d), VoxelData::U32(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            (VoxelData::U64(d), VoxelData::U64(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            _ => unreachable!("element types checked by caller"),
        }
    }
}

/// A 3-D voxel volume with physical resolution metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    resolution_nm: [f64; 3],
    kind: VolumeKind,
    data: VoxelData,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], resolution_nm: [f64; 3], kind: VolumeKind, data: VoxelData) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::NonPositiveDims(dims));
        }
        if resolution_nm.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(VolumeError::InvalidResolution(resolution_nm));
        }
        let dtype = data.dtype();
        let valid = match kind {
            VolumeKind::Raw | VolumeKind::Probability => dtype == Dtype::U8,
            VolumeKind::Labels => dtype != Dtype::U8,
        };
        if !valid {
            return Err(VolumeError::DtypeKind { dtype, kind });
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                expected: expected * dtype.width(),
                actual: data.len() * dtype.width(),
            });
        }
        Ok(Self { dims, resolution_nm, kind, data })
    }

    pub fn from_u8(dims: [usize; 3], resolution_nm: [f64; 3], kind: VolumeKind, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, resolution_nm, kind, VoxelData::U8(data))
    }

    pub fn from_labels(dims: [usize; 3], resolution_nm: [f64; 3], labels: Vec<u32>) -> Result<Self> {
        Self::new(dims, resolution_nm, VolumeKind::Labels, VoxelData::U32(labels))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn resolution_nm(&self) -> [f64; 3] {
        self.resolution_nm
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Byte elements of a raw or probability volume.
    pub fn bytes(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Ok(v),
            _ => Err(VolumeError::KindMismatch { expected: "raw or probability", actual: self.kind }),
        }
    }

    /// 32-bit labels of a label volume.
    pub fn labels(&self) -> Result<&[u32]> {
        match &self.data {
            VoxelData::U32(v) => Ok(v),
            _ => Err(VolumeError::KindMismatch { expected: "32-bit labels", actual: self.kind }),
        }
    }

    /// Widen 32-bit labels to 8-byte elements.
    pub fn widen_labels(&self) -> Result<VoxelGrid> {
        let labels = self.labels()?;
        Self::new(
            self.dims,
            self.resolution_nm,
            VolumeKind::Labels,
            VoxelData::U64(labels.iter().map(|&l| l as u64).collect()),
        )
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(VolumeError::ShapeMismatch { expected: self.dims, actual: other.dims });
        }
        Ok(())
    }

    /// Copy the box `[origin, origin + size)` into a new grid.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<VoxelGrid> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(VolumeError::ShapeMismatch { expected: self.dims, actual: size });
            }
        }
        let n = size[0] * size[1] * size[2];
        let mut out = self.data.zeros_like(n);
        for z in 0..size[2] {
            for y in 0..size[1] {
                let src = self.index(origin[0], origin[1] + y, origin[2] + z);
                let dst = size[0] * (y + size[1] * z);
                out.copy_from(dst, &self.data, src, size[0]);
            }
        }
        VoxelGrid::new(size, self.resolution_nm, self.kind, out)
    }

    /// Reflect-pad a byte volume by `pad` voxels on each side in x and y.
    pub fn pad_xy_mirror(&self, pad: usize) -> Result<VoxelGrid> {
        let src = self.bytes()?;
        let [nx, ny, nz] = self.dims;
        let (px, py) = (nx + 2 * pad, ny + 2 * pad);
        let mut out = vec![0u8; px * py * nz];
        for z in 0..nz {
            for y in 0..py {
                let sy = reflect(y as isize - pad as isize, ny);
                for x in 0..px {
                    let sx = reflect(x as isize - pad as isize, nx);
                    out[x + px * (y + py * z)] = src[sx + nx * (sy + ny * z)];
                }
            }
        }
        VoxelGrid::from_u8([px, py, nz], self.resolution_nm, self.kind, out)
    }

    /// Physical volume in cubic micrometres.
    pub fn volume_um3(&self) -> f64 {
        (0..3).map(|a| self.dims[a] as f64 * self.resolution_nm[a] * 1e-3).product()
    }
}

/// Reflect an out-of-range coordinate back into `0..n` without repeating the edge.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    dims: [i64; 3],
    dtype: String,
    resolution_nm: [f64; 3],
    kind: VolumeKind,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io { path: path.to_path_buf(), source }
}

/// Read a `.vol` array and its JSON sidecar.
pub fn load_volume(data_path: impl AsRef<Path>, metadata_path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let (data_path, metadata_path) = (data_path.as_ref(), metadata_path.as_ref());
    let text = fs::read_to_string(metadata_path).map_err(io_err(metadata_path))?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|e| VolumeError::Metadata(e.to_string()))?;
    if meta.dims.iter().any(|&d| d <= 0) {
        return Err(VolumeError::NonPositiveDims(meta.dims.map(|d| d.max(0) as usize)));
    }
    let dims = meta.dims.map(|d| d as usize);
    let dtype = Dtype::parse(&meta.dtype)?;
    let bytes = fs::read(data_path).map_err(io_err(data_path))?;
    let count = dims[0] * dims[1] * dims[2];
    if bytes.len() != count * dtype.width() {
        return Err(VolumeError::LengthMismatch { expected: count * dtype.width(), actual: bytes.len() });
    }
    let data = match dtype {
        Dtype::U8 => VoxelData::U8(bytes),
        Dtype::U32 => VoxelData::U32(
            bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::U64 => VoxelData::U64(
            bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    VoxelGrid::new(dims, meta.resolution_nm, meta.kind, data)
}

/// Write a volume so that [`load_volume`] reproduces it bit-exactly.
///
/// Both files are written to temporaries and renamed into place, so a failed
/// save leaves nothing behind.
pub fn save_volume(grid: &VoxelGrid, data_path: impl AsRef<Path>, metadata_path: impl AsRef<Path>) -> Result<()> {
    let (data_path, metadata_path) = (data_path.as_ref(), metadata_path.as_ref());
    if data_path.as_os_str().is_empty() || metadata_path.as_os_str().is_empty() {
        return Err(VolumeError::EmptyPath);
    }
    let mut bytes = Vec::with_capacity(grid.len() * grid.data.dtype().width());
    match &grid.data {
        VoxelData::U8(v) => bytes.extend_from_slice(v),
        VoxelData::U32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        VoxelData::U64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    let meta = Metadata {
        dims: grid.dims.map(|d| d as i64),
        dtype: grid.data.dtype().name().to_string(),
        resolution_nm: grid.resolution_nm,
        kind: grid.kind,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| VolumeError::Metadata(e.to_string()))?;
    let data_tmp = write_temp(data_path, &bytes)?;
    let meta_tmp = match write_temp(metadata_path, json.as_bytes()) {
        Ok(p) => p,
        Err(e) => {
            let _ = fs::remove_file(&data_tmp);
            return Err(e);
        }
    };
    let renamed = fs::rename(&data_tmp, data_path)
        .map_err(io_err(data_path))
        .and_then(|_| fs::rename(&meta_tmp, metadata_path).map_err(io_err(metadata_path)));
    if renamed.is_err() {
        let _ = fs::remove_file(&data_tmp);
        let _ = fs::remove_file(&meta_tmp);
    }
    renamed
}

fn write_temp(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    let result = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    match result {
        Ok(()) => Ok(tmp),
        Err(source) => {
            let _ = fs::remove_file(&tmp);
            Err(VolumeError::Io { path: path.to_path_buf(), source })
        }
    }
}

/// Save `<stem>.vol` + `<stem>.json` inside `dir`.
pub fn save_named(grid: &VoxelGrid, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    save_volume(grid, dir.join(format!("{stem}.vol")), dir.join(format!("{stem}.json")))
}

/// Load `<stem>.vol` + `<stem>.json` from `dir`.
pub fn load_named(dir: impl AsRef<Path>, stem: &str) -> Result<VoxelGrid> {
    let dir = dir.as_ref();
    load_volume(dir.join(format!("{stem}.vol")), dir.join(format!("{stem}.json")))
}

/// One streaming chunk: a core box plus a halo clipped at the volume border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub origin: [usize; 3],
    pub core: [usize; 3],
    pub halo_lo: [usize; 3],
    pub halo_hi: [usize; 3],
}

impl ChunkSpec {
    pub fn window_origin(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.origin[a] - self.halo_lo[a])
    }

    pub fn window_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.halo_lo[a] + self.core[a] + self.halo_hi[a])
    }

    pub fn core_contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.core[a])
    }
}

/// Tile `dims` with cores of `core_size` (the last core on an axis may be
/// shorter) and attach halos of up to `halo` voxels, clipped at the border.
pub fn chunk_plan(dims: [usize; 3], core_size: [usize; 3], halo: [usize; 3]) -> Result<Vec<ChunkSpec>> {
    if core_size.iter().any(|&c| c == 0) {
        return Err(VolumeError::ZeroCoreSize(core_size));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::NonPositiveDims(dims));
    }
    let starts = |a: usize| (0..dims[a]).step_by(core_size[a]).collect::<Vec<_>>();
    let (xs, ys, zs) = (starts(0), starts(1), starts(2));
    let mut plan = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let origin = [x, y, z];
                let core = [0, 1, 2].map(|a| core_size[a].min(dims[a] - origin[a]));
                let halo_lo = [0, 1, 2].map(|a| halo[a].min(origin[a]));
                let halo_hi = [0, 1, 2].map(|a| halo[a].min(dims[a] - origin[a] - core[a]));
                plan.push(ChunkSpec { origin, core, halo_lo, halo_hi });
            }
        }
    }
    Ok(plan)
}

/// Output of processing one chunk: a grid covering that chunk's window.
#[derive(Debug, Clone)]
pub struct ChunkResult {
    pub chunk: usize,
    pub grid: VoxelGrid,
}

/// Assemble chunk results into one volume, taking only core regions.
///
/// Results may arrive in any order; halo contents are ignored.
pub fn stitch(results: &[ChunkResult], plan: &[ChunkSpec], out_dims: [usize; 3]) -> Result<VoxelGrid> {
    let mut by_chunk: Vec<Option<&ChunkResult>> = vec![None; plan.len()];
    for r in results {
        let slot = by_chunk.get_mut(r.chunk).ok_or(VolumeError::UnknownChunk(r.chunk))?;
        *slot = Some(r);
    }
    let first = results.first().ok_or(VolumeError::MissingChunk(0))?;
    let n = out_dims[0] * out_dims[1] * out_dims[2];
    let mut out = first.grid.data.zeros_like(n);
    for (i, spec) in plan.iter().enumerate() {
        let r = by_chunk[i].ok_or(VolumeError::MissingChunk(i))?;
        let wd = spec.window_dims();
        if r.grid.dims != wd {
            return Err(VolumeError::ShapeMismatch { expected: wd, actual: r.grid.dims });
        }
        if r.grid.data.dtype() != first.grid.data.dtype() {
            return Err(VolumeError::DtypeKind { dtype: r.grid.data.dtype(), kind: first.grid.kind });
        }
        for a in 0..3 {
            if spec.origin[a] + spec.core[a] > out_dims[a] {
                return Err(VolumeError::ShapeMismatch { expected: out_dims, actual: wd });
            }
        }
        for z in 0..spec.core[2] {
            for y in 0..spec.core[1] {
                let src = r.grid.index(spec.halo_lo[0], spec.halo_lo[1] + y, spec.halo_lo[2] + z);
                let (gx, gy, gz) = (spec.origin[0], spec.origin[1] + y, spec.origin[2] + z);
                let dst = gx + out_dims[0] * (gy + out_dims[1] * gz);
                out.copy_from(dst, &r.grid.data, src, spec.core[0]);
            }
        }
    }
    VoxelGrid::new(out_dims, first.grid.resolution_nm, first.grid.kind, out)
}

/// Block-mean pooling over `factor x factor` tiles in x and y.
///
/// Partial tiles at the far edges average the voxels they contain; means are
/// rounded half-up.
pub fn downsample_xy(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 {
        return Err(VolumeError::ZeroFactor);
    }
    if grid.kind == VolumeKind::Labels {
        return Err(VolumeError::LabelsNotAveraged);
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let src = grid.bytes()?;
    let [nx, ny, nz] = grid.dims;
    let (ox, oy) = (nx.div_ceil(factor), ny.div_ceil(factor));
    let mut out = vec![0u8; ox * oy * nz];
    for z in 0..nz {
        for by in 0..oy {
            for bx in 0..ox {
                let (mut sum, mut n) = (0u64, 0u64);
                for y in by * factor..((by + 1) * factor).min(ny) {
                    for x in bx * factor..((bx + 1) * factor).min(nx) {
                        sum += src[x + nx * (y + ny * z)] as u64;
                        n += 1;
                    }
                }
                out[bx + ox * (by + oy * z)] = ((2 * sum + n) / (2 * n)) as u8;
            }
        }
    }
    let r = grid.resolution_nm;
    let res = [r[0] * factor as f64, r[1] * factor as f64, r[2]];
    VoxelGrid::from_u8([ox, oy, nz], res, grid.kind, out)
}
