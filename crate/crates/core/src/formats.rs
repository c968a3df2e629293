//! Little-endian binary formats for spectra (`ODPS`), feature datasets
//! (`ODPD`) and models (`ODPM`), plus the JSON subspace sidecar.
//!
//! All values are stored as `f32`. Decoding errors report the byte offset
//! at which the input stopped making sense.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid_spectra::SpectrumMap;
use crate::model::{Head, Linear, ModelParams};
use crate::synthgen::{Dataset, FeatureSample, GroundTruthSubspaces};

pub const SPECTRUM_MAGIC: &[u8; 4] = b"ODPS";
pub const DATASET_MAGIC: &[u8; 4] = b"ODPD";
pub const MODEL_MAGIC: &[u8; 4] = b"ODPM";
pub const VERSION: u32 = 1;

/// Bytes before the first sample of an `ODPD` file.
pub const DATASET_HEADER_LEN: usize = 28;

/// Bytes per sample in an `ODPD` file of dimension `dim`.
pub fn dataset_record_len(dim: usize) -> usize {
    4 * dim + 5
}

const FLAG_SHORTCUT: u32 = 1;
const FLAG_UNSEEN: u32 = 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::format(self.pos as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let v = self.u32("version")?;
        if v != VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::format((start + 4 * i) as u64, format!("non-finite value in {what}")));
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    put_u32(&mut out, VERSION as usize);
    out
}

fn dim_u32(v: usize, what: &str) -> Result<usize> {
    u32::try_from(v).map(|_| v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_spectrum(map: &SpectrumMap) -> Vec<u8> {
    let mut out = header(SPECTRUM_MAGIC);
    put_u32(&mut out, map.height());
    put_u32(&mut out, map.width());
    put_f32s(&mut out, map.values());
    out
}

pub fn decode_spectrum(bytes: &[u8]) -> Result<SpectrumMap> {
    let mut r = Reader::new(bytes);
    r.magic(SPECTRUM_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 {
        return Err(r.err("zero-sized spectrum"));
    }
    let vals = r.f32s(h * w, "spectrum values")?;
    r.finish()?;
    SpectrumMap::from_values(w, h, vals).map_err(|e| Error::format(16, e))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = header(DATASET_MAGIC);
    put_u32(&mut out, dim_u32(ds.len(), "N")?);
    put_u32(&mut out, dim_u32(ds.dim, "D")?);
    put_u32(&mut out, dim_u32(ds.n_generators, "K")?);
    put_u32(&mut out, dim_u32(ds.n_semantic, "C")?);
    let flags = (if ds.shortcut_bias { FLAG_SHORTCUT } else { 0 }) | (if ds.unseen_generator { FLAG_UNSEEN } else { 0 });
    put_u32(&mut out, flags as usize);
    out.reserve(ds.len() * dataset_record_len(ds.dim));
    for s in &ds.samples {
        if s.z.len() != ds.dim {
            return Err(Error::shape(format!("sample has {} features, header says {}", s.z.len(), ds.dim)));
        }
        put_f32s(&mut out, &s.z);
        out.push(s.y);
        out.extend_from_slice(&s.g.to_le_bytes());
        out.extend_from_slice(&s.c.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let n = r.u32("N")? as usize;
    let dim = r.u32("D")? as usize;
    let k = r.u32("K")? as usize;
    let c = r.u32("C")? as usize;
    let flags_pos = r.pos;
    let flags = r.u32("flags")?;
    if dim == 0 {
        return Err(Error::format(12, "D must be positive"));
    }
    if flags & !(FLAG_SHORTCUT | FLAG_UNSEEN) != 0 {
        return Err(Error::format(flags_pos as u64, format!("unknown flag bits {flags:#x}")));
    }
    let expected = DATASET_HEADER_LEN as u128 + n as u128 * dataset_record_len(dim) as u128;
    if bytes.len() as u128 != expected {
        let at = bytes.len().min(expected as usize);
        return Err(Error::format(
            at as u64,
            format!("file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let z = r.f32s(dim, "features")?;
        let rec = r.pos;
        let y = r.u8("label")?;
        let g = r.u16("generator id")?;
        let cc = r.u16("semantic id")?;
        if y > 1 || (y == 0) != (g == 0) {
            return Err(Error::format(rec as u64, format!("sample {i}: label {y} inconsistent with generator {g}")));
        }
        if usize::from(g) > k + 1 {
            return Err(Error::format((rec + 1) as u64, format!("sample {i}: generator id {g} exceeds K+1")));
        }
        if cc == 0 || usize::from(cc) > c {
            return Err(Error::format((rec + 3) as u64, format!("sample {i}: semantic id {cc} outside 1..={c}")));
        }
        samples.push(FeatureSample { z, y, g, c: cc });
    }
    r.finish()?;
    Ok(Dataset {
        dim,
        n_generators: k,
        n_semantic: c,
        shortcut_bias: flags & FLAG_SHORTCUT != 0,
        unseen_generator: flags & FLAG_UNSEEN != 0,
        samples,
    })
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rows());
    put_u32(out, t.cols());
    put_f32s(out, t.data());
}

fn head_tensors(h: &Head) -> Vec<&Tensor> {
    match h {
        Head::Linear(l) => vec![&l.w, &l.b],
        Head::Mlp(a, b) => vec![&a.w, &a.b, &b.w, &b.b],
    }
}

pub fn encode_model(p: &ModelParams) -> Vec<u8> {
    let mut out = header(MODEL_MAGIC);
    put_u32(&mut out, p.dim);
    put_u32(&mut out, p.hidden);
    put_u32(&mut out, p.n_generators);
    for t in [&p.gate_in.w, &p.gate_in.b, &p.gate_out.w, &p.gate_out.b]
        .into_iter()
        .chain(head_tensors(&p.auth))
        .chain(head_tensors(&p.gen))
    {
        put_tensor(&mut out, t);
    }
    out
}

fn read_tensor(r: &mut Reader, what: &str, rows: Option<usize>, cols: Option<usize>) -> Result<Tensor> {
    let at = r.pos;
    let nr = r.u32(what)? as usize;
    let nc = r.u32(what)? as usize;
    if rows.is_some_and(|e| e != nr) || cols.is_some_and(|e| e != nc) || nr == 0 || nc == 0 {
        let want = |v: Option<usize>| v.map_or("?".to_string(), |x| x.to_string());
        return Err(Error::format(
            at as u64,
            format!("{what}: shape {nr}x{nc}, expected {}x{}", want(rows), want(cols)),
        ));
    }
    let vals = r.f32s(nr * nc, what)?;
    Tensor::new(nr, nc, vals).map_err(|e| Error::format(at as u64, e))
}

fn read_linear(r: &mut Reader, what: &str, rows: usize, cols: Option<usize>) -> Result<Linear> {
    let w = read_tensor(r, &format!("{what} weight"), Some(rows), cols)?;
    let b = read_tensor(r, &format!("{what} bias"), Some(1), Some(w.cols()))?;
    Ok(Linear { w, b })
}

/// A head whose first layer width equals `out` is linear; otherwise that
/// width is an MLP hidden size.
fn read_head(r: &mut Reader, what: &str, dim: usize, out: usize) -> Result<Head> {
    let first = read_linear(r, what, dim, None)?;
    if first.w.cols() == out {
        return Ok(Head::Linear(first));
    }
    let h = first.w.cols();
    let second = read_linear(r, &format!("{what} output"), h, Some(out))?;
    Ok(Head::Mlp(first, second))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let dim = r.u32("D")? as usize;
    let hidden = r.u32("H")? as usize;
    let k = r.u32("K")? as usize;
    if dim == 0 || hidden == 0 || k < 2 {
        return Err(Error::format(8, format!("invalid header D={dim} H={hidden} K={k}")));
    }
    let gate_in = read_linear(&mut r, "gate hidden", dim, Some(hidden))?;
    let gate_out = read_linear(&mut r, "gate output", hidden, Some(2 * dim))?;
    let auth = read_head(&mut r, "auth head", dim, 2)?;
    let gen = read_head(&mut r, "generator head", dim, k + 1)?;
    r.finish()?;
    Ok(ModelParams {
        dim,
        hidden,
        n_generators: k,
        gate_in,
        gate_out,
        auth,
        gen,
    })
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_spectrum(path: &Path, map: &SpectrumMap) -> Result<()> {
    write_atomic(path, &encode_spectrum(map))
}

pub fn load_spectrum(path: &Path) -> Result<SpectrumMap> {
    decode_spectrum(&fs::read(path)?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_model(path: &Path, p: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_model(p))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_model(&fs::read(path)?)
}

pub fn save_subspaces(path: &Path, s: &GroundTruthSubspaces) -> Result<()> {
    let json = serde_json::to_string(s).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, json.as_bytes())
}

pub fn load_subspaces(path: &Path, dim: usize) -> Result<GroundTruthSubspaces> {
    let text = fs::read_to_string(path)?;
    let s: GroundTruthSubspaces =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    s.validate(dim)?;
    Ok(s)
}
