//! Binary dataset format, synthetic generation, text conversion, scanning
//! and partitioning.
//!
//! Layout (little-endian):
//!
//! ```text
//! header   "SGD1" | u32 version=1 | u64 N | u32 d | u32 block_size | u64 shuffle_seed
//! block*   u32 count | count * (d * f64 features, f64 label) | u32 crc32
//! ```
//!
//! Every block but the last holds `block_size` examples. The CRC covers the
//! count and the example bytes. Examples are stored in a random permutation
//! fixed when the file is written, so any run of consecutive blocks is a
//! simple random sample.

use std::fs::File;
use std::io::{BufRead, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use specgd_core::{BlockView, Example, ExampleRef};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGD1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const DEFAULT_BLOCK_SIZE: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetHeader {
    pub n_examples: u64,
    pub dim: u32,
    pub block_size: u32,
    pub shuffle_seed: u64,
}

impl DatasetHeader {
    pub fn new(n_examples: u64, dim: u32, block_size: u32, shuffle_seed: u64) -> Result<Self> {
        if n_examples == 0 {
            return Err(Error::Config("a dataset needs at least one example".into()));
        }
        if dim == 0 {
            return Err(Error::Config("a dataset needs at least one feature".into()));
        }
        if block_size == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        Ok(DatasetHeader {
            n_examples,
            dim,
            block_size,
            shuffle_seed,
        })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.n_examples.to_le_bytes());
        b[16..20].copy_from_slice(&self.dim.to_le_bytes());
        b[20..24].copy_from_slice(&self.block_size.to_le_bytes());
        b[24..32].copy_from_slice(&self.shuffle_seed.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::Format("file shorter than the header".into()));
        }
        if &b[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        DatasetHeader::new(u64_at(8), u32_at(16), u32_at(20), u64_at(24))
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn n_blocks(&self) -> u64 {
        self.n_examples.div_ceil(self.block_size as u64)
    }

    /// Examples stored in block `b`.
    pub fn block_len(&self, b: u64) -> u64 {
        let start = b * self.block_size as u64;
        (self.n_examples - start).min(self.block_size as u64)
    }

    fn row_width(&self) -> usize {
        self.dim as usize + 1
    }

    fn full_block_bytes(&self) -> u64 {
        8 + self.block_size as u64 * self.row_width() as u64 * 8
    }

    /// SHA-256 of the encoded header, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// A dataset held in memory, rows laid out as in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    rows: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from row-major `rows` (`dim` features then the label).
    /// With `shuffle_seed` the rows are permuted by a seeded Fisher-Yates
    /// shuffle; without it they keep their order (and the header records 0).
    pub fn from_rows(
        mut rows: Vec<f64>,
        dim: usize,
        block_size: u32,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        let w = dim + 1;
        if dim == 0 || !rows.len().is_multiple_of(w) {
            return Err(Error::Config(format!(
                "{} values do not form rows of width {w}",
                rows.len()
            )));
        }
        let n = rows.len() / w;
        for (i, r) in rows.chunks(w).enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("example {i} has a non-finite value")));
            }
            if r[dim] != 1.0 && r[dim] != -1.0 {
                return Err(Error::Config(format!(
                    "example {i} has label {}, expected +1 or -1",
                    r[dim]
                )));
            }
        }
        let header =
            DatasetHeader::new(n as u64, dim as u32, block_size, shuffle_seed.unwrap_or(0))?;
        if let Some(seed) = shuffle_seed {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut out = Vec::with_capacity(rows.len());
            for &p in &perm {
                out.extend_from_slice(&rows[p * w..(p + 1) * w]);
            }
            rows = out;
        }
        Ok(Dataset { header, rows })
    }

    pub fn from_examples(
        examples: &[Example],
        block_size: u32,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        let dim = examples.first().map(|e| e.features.len()).unwrap_or(0);
        let mut rows = Vec::with_capacity(examples.len() * (dim + 1));
        for (i, e) in examples.iter().enumerate() {
            if e.features.len() != dim {
                return Err(Error::Config(format!(
                    "example {i} has {} features, expected {dim}",
                    e.features.len()
                )));
            }
            rows.extend_from_slice(&e.features);
            rows.push(e.label);
        }
        Self::from_rows(rows, dim, block_size, shuffle_seed)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn n(&self) -> u64 {
        self.header.n_examples
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn n_blocks(&self) -> usize {
        self.header.n_blocks() as usize
    }

    pub fn block(&self, b: usize) -> BlockView<'_> {
        let w = self.header.row_width();
        let bs = self.header.block_size as usize;
        let start = b * bs * w;
        let end = ((b + 1) * bs * w).min(self.rows.len());
        BlockView::new(&self.rows[start..end], self.dim()).expect("rows are whole")
    }

    /// Block ids of one full pass starting at `start`, wrapping around.
    pub fn scan_order(&self, start: usize) -> impl Iterator<Item = usize> + '_ {
        let nb = self.n_blocks();
        (0..nb).map(move |k| (start + k) % nb)
    }

    /// Every example exactly once, starting at block `start`.
    pub fn scan(&self, start: usize) -> impl Iterator<Item = ExampleRef<'_>> + '_ {
        self.scan_order(start).flat_map(move |b| {
            let v = self.block(b);
            (0..v.len()).map(move |i| v.example(i))
        })
    }

    pub fn examples(&self) -> Vec<Example> {
        self.scan(0)
            .map(|e| Example {
                features: e.features.to_vec(),
                label: e.label,
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.header.to_bytes())?;
        let mut buf = Vec::new();
        for b in 0..self.n_blocks() {
            let v = self.block(b);
            buf.clear();
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for ex in v.iter() {
                for x in ex.features {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                buf.extend_from_slice(&ex.label.to_le_bytes());
            }
            let crc = crc32fast::hash(&buf);
            w.write_all(&buf)?;
            w.write_all(&crc.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    /// Loads and checksums every block.
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BlockReader::open(path)?;
        let header = *r.header();
        let mut rows = Vec::with_capacity(header.n_examples as usize * header.row_width());
        for b in 0..header.n_blocks() {
            rows.extend(r.read_block(b)?);
        }
        r.expect_end()?;
        Ok(Dataset { header, rows })
    }
}

/// Streaming access to a dataset file, one checksummed block at a time.
pub struct BlockReader {
    file: File,
    header: DatasetHeader,
    buf: Vec<u8>,
}

impl BlockReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut hb = [0u8; HEADER_LEN];
        file.read_exact(&mut hb).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Format("file shorter than the header".into())
            }
            _ => Error::io(path, e),
        })?;
        let header = DatasetHeader::from_bytes(&hb)?;
        Ok(BlockReader {
            file,
            header,
            buf: Vec::new(),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    /// Rows of block `b` after verifying its count and checksum.
    pub fn read_block(&mut self, b: u64) -> Result<Vec<f64>> {
        let h = self.header;
        if b >= h.n_blocks() {
            return Err(Error::Config(format!(
                "block {b} out of range ({} blocks)",
                h.n_blocks()
            )));
        }
        let count = h.block_len(b);
        let payload = 4 + count as usize * h.row_width() * 8;
        self.file.seek(SeekFrom::Start(
            HEADER_LEN as u64 + b * h.full_block_bytes(),
        ))?;
        self.buf.resize(payload + 4, 0);
        self.file
            .read_exact(&mut self.buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Corrupt {
                    block: b,
                    reason: "truncated".into(),
                },
                _ => Error::Stream(e),
            })?;
        let stored = u32::from_le_bytes(self.buf[payload..].try_into().unwrap());
        if crc32fast::hash(&self.buf[..payload]) != stored {
            return Err(Error::Corrupt {
                block: b,
                reason: "checksum mismatch".into(),
            });
        }
        let got = u32::from_le_bytes(self.buf[..4].try_into().unwrap()) as u64;
        if got != count {
            return Err(Error::Corrupt {
                block: b,
                reason: format!("holds {got} examples, expected {count}"),
            });
        }
        Ok(self.buf[4..payload]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Blocks of one pass starting at `start`, wrapping around.
    pub fn scan(&mut self, start: u64) -> impl Iterator<Item = Result<(u64, Vec<f64>)>> + '_ {
        let nb = self.header.n_blocks();
        (0..nb).map(move |k| {
            let b = (start + k) % nb;
            self.read_block(b).map(|rows| (b, rows))
        })
    }

    fn expect_end(&mut self) -> Result<()> {
        let h = self.header;
        let end = HEADER_LEN as u64
            + (h.n_blocks() - 1) * h.full_block_bytes()
            + 8
            + h.block_len(h.n_blocks() - 1) * h.row_width() as u64 * 8;
        let len = self.file.metadata()?.len();
        if len != end {
            return Err(Error::Format(format!(
                "file is {len} bytes, expected {end}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenSpec {
    pub n: u64,
    pub d: usize,
    /// Probability of flipping each label.
    pub noise: f64,
    pub seed: u64,
    pub block_size: u32,
}

/// Synthetic linearly separable data with label noise.
///
/// The hidden model has random signs and magnitudes in `[0.5, 1.5]` so every
/// feature carries signal. Features are standard normal and the label is the
/// sign of the hidden margin, flipped with probability `noise`.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, Vec<f64>)> {
    if spec.n == 0 || spec.d == 0 {
        return Err(Error::Config("n and d must be >= 1".into()));
    }
    if !(0.0..=0.5).contains(&spec.noise) {
        return Err(Error::Config(format!(
            "noise must be in [0, 0.5], got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth: Vec<f64> = (0..spec.d)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let w = spec.d + 1;
    let mut rows = Vec::with_capacity(spec.n as usize * w);
    let mut x = vec![0.0; spec.d];
    for _ in 0..spec.n {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let m = specgd_core::vecmath::dot(&truth, &x);
        let mut y = if m >= 0.0 { 1.0 } else { -1.0 };
        if spec.noise > 0.0 && rng.random_bool(spec.noise) {
            y = -y;
        }
        rows.extend_from_slice(&x);
        rows.push(y);
    }
    let shuffle_seed = rng.random::<u64>();
    Ok((
        Dataset::from_rows(rows, spec.d, spec.block_size, Some(shuffle_seed))?,
        truth,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextFormat {
    /// `x1,...,xd,label` per line.
    Csv,
    /// `label idx:val ...` per line, indices starting at 1.
    Sparse,
}

/// Parses a text dataset and shuffles it with `seed`.
pub fn convert<R: BufRead>(
    input: R,
    format: TextFormat,
    block_size: u32,
    seed: u64,
) -> Result<Dataset> {
    let (rows, dim) = match format {
        TextFormat::Csv => parse_csv(input)?,
        TextFormat::Sparse => parse_sparse(input)?,
    };
    Dataset::from_rows(rows, dim, block_size, Some(seed))
}

fn parse_label(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad label {s:?}"),
    })?;
    if v == 1.0 || v == -1.0 {
        Ok(v)
    } else {
        Err(Error::Parse {
            line,
            msg: format!("label must be +1 or -1, got {s:?}"),
        })
    }
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

fn data_lines<R: BufRead>(input: R) -> impl Iterator<Item = Result<(usize, String)>> {
    input.lines().enumerate().filter_map(|(i, l)| match l {
        Err(e) => Some(Err(Error::Stream(e))),
        Ok(l) => {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, t.to_string())))
            }
        }
    })
}

fn parse_csv<R: BufRead>(input: R) -> Result<(Vec<f64>, usize)> {
    let mut rows = Vec::new();
    let mut dim = None;
    for item in data_lines(input) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.split(',').collect();
        let d = *dim.get_or_insert(fields.len().saturating_sub(1));
        if d == 0 {
            return Err(Error::Parse {
                line,
                msg: "need at least one feature and a label".into(),
            });
        }
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            rows.push(parse_value(f, line)?);
        }
        rows.push(parse_label(fields[d], line)?);
    }
    match dim {
        Some(d) => Ok((rows, d)),
        None => Err(Error::Parse {
            line: 0,
            msg: "no examples".into(),
        }),
    }
}

fn parse_sparse<R: BufRead>(input: R) -> Result<(Vec<f64>, usize)> {
    let mut parsed: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut dim = 0;
    for item in data_lines(input) {
        let (line, text) = item?;
        let mut parts = text.split_whitespace();
        let label = parse_label(parts.next().unwrap_or(""), line)?;
        let mut feats = Vec::new();
        for p in parts {
            let (i, v) = p.split_once(':').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected idx:val, got {p:?}"),
            })?;
            let idx: usize = i.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad index {i:?}"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line,
                    msg: "indices start at 1".into(),
                });
            }
            feats.push((idx - 1, parse_value(v, line)?));
            dim = dim.max(idx);
        }
        parsed.push((label, feats));
    }
    if parsed.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no examples".into(),
        });
    }
    if dim == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "no features".into(),
        });
    }
    let mut rows = Vec::with_capacity(parsed.len() * (dim + 1));
    for (label, feats) in parsed {
        let start = rows.len();
        rows.resize(start + dim, 0.0);
        for (j, v) in feats {
            rows[start + j] = v;
        }
        rows.push(label);
    }
    Ok((rows, dim))
}

/// Round-robin assignment of blocks to `m` workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partitioning {
    pub m: usize,
    pub n_blocks: usize,
}

impl Partitioning {
    pub fn new(n_blocks: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if m > n_blocks {
            return Err(Error::Config(format!(
                "{m} workers but only {n_blocks} blocks"
            )));
        }
        Ok(Partitioning { m, n_blocks })
    }

    pub fn owner(&self, block: usize) -> usize {
        block % self.m
    }

    pub fn blocks_of(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        (p..self.n_blocks).step_by(self.m)
    }
}

pub fn partition(ds: &Dataset, m: usize) -> Result<Partitioning> {
    Partitioning::new(ds.n_blocks(), m)
}
