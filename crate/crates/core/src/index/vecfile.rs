//! On-disk vector file: a fixed header followed by little-endian f32 rows.
//!
//! Layout: 8-byte magic `TRENDVEC`, u32 version (1), u32 dimension,
//! u64 row count, then `count * dim` f32 values. The 24-byte header keeps
//! rows 4-byte aligned, so a memory-mapped file can be scanned in place.
//! An id sidecar (one id per line, same order as the rows) travels with it.

use std::io::Write;
use std::path::Path;

use memmap2::Mmap;

use super::IndexError;

const MAGIC: &[u8; 8] = b"TRENDVEC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Write `data` (row-major, `dim` values per row) to `path` atomically.
pub fn write_vector_file(path: &Path, dim: usize, data: &[f32]) -> Result<(), IndexError> {
    if dim == 0 && !data.is_empty() {
        return Err(IndexError::VecFile("dimension 0 with nonempty data".into()));
    }
    if dim > 0 && data.len() % dim != 0 {
        return Err(IndexError::VecFile(format!(
            "{} values is not a multiple of dimension {dim}",
            data.len()
        )));
    }
    let count = if dim == 0 { 0 } else { (data.len() / dim) as u64 };
    let tmp = path.with_extension("vec.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(dim as u32).to_le_bytes())?;
        f.write_all(&count.to_le_bytes())?;
        for v in data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        f.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize), IndexError> {
    if bytes.len() < HEADER_LEN {
        return Err(IndexError::VecFile("file shorter than header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(IndexError::VecFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(IndexError::VecFile(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expect = HEADER_LEN + count * dim * 4;
    if bytes.len() != expect {
        return Err(IndexError::VecFile(format!(
            "size mismatch: header implies {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok((dim, count))
}

/// Read a whole vector file into memory, returning `(dim, values)`.
pub fn read_vector_file(path: &Path) -> Result<(usize, Vec<f32>), IndexError> {
    let file = std::fs::File::open(path)?;
    // SAFETY: mapped read-only; the file is ours and not mutated concurrently.
    let map = unsafe { Mmap::map(&file)? };
    let (dim, count) = parse_header(&map)?;
    let mut data = Vec::with_capacity(dim * count);
    for chunk in map[HEADER_LEN..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((dim, data))
}

/// A memory-mapped, read-only view of a vector file for in-place scans.
pub struct MappedVectors {
    map: Mmap,
    dim: usize,
    count: usize,
}

impl MappedVectors {
    pub fn open(path: &Path) -> Result<Self, IndexError> {
        let file = std::fs::File::open(path)?;
        // SAFETY: mapped read-only; the file is ours and not mutated concurrently.
        let map = unsafe { Mmap::map(&file)? };
        let (dim, count) = parse_header(&map)?;
        if cfg!(target_endian = "big") {
            return Err(IndexError::VecFile(
                "in-place mapping requires a little-endian host".into(),
            ));
        }
        Ok(Self { map, dim, count })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Row `i` as an f32 slice straight out of the mapping.
    pub fn row(&self, i: usize) -> &[f32] {
        assert!(i < self.count, "row {i} out of range ({} rows)", self.count);
        let start = HEADER_LEN + i * self.dim * 4;
        let bytes = &self.map[start..start + self.dim * 4];
        debug_assert_eq!(bytes.as_ptr() as usize % std::mem::align_of::<f32>(), 0);
        // SAFETY: the mapping is page-aligned and the 24-byte header keeps
        // every row 4-byte aligned; the host is little-endian (checked in
        // `open`), matching the on-disk encoding.
        unsafe { std::slice::from_raw_parts(bytes.as_ptr() as *const f32, self.dim) }
    }
}
