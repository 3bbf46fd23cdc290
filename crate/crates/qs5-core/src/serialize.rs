//! Binary model file format.
//!
//! Layout, all little-endian:
//!   magic "QSSM" | version u32 | metadata len u32 + UTF-8 text |
//!   arrays in declared order | CRC32 u32
//!
//! Each array is preceded by a dtype byte (0 = f32, 1 = complex as
//! interleaved f32 pairs, 2 = i8, 3 = i16) and a 4-entry u32 shape header
//! (trailing entries 1). Reals are stored as f32.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{QssmError, Result};
use crate::model::{ModelBundle, ModelMeta, QuantConfig, TaskKind};
use crate::ssm::Readout;

pub const MAGIC: &[u8; 4] = b"QSSM";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_C64: u8 = 1;
const DTYPE_I8: u8 = 2;
const DTYPE_I16: u8 = 3;

fn fmt_err(msg: impl Into<String>) -> QssmError {
    QssmError::Format(msg.into())
}

fn write_shape(buf: &mut Vec<u8>, dims: [u32; 4]) {
    for d in dims {
        buf.write_u32::<LittleEndian>(d).unwrap();
    }
}

fn write_f32_array(buf: &mut Vec<u8>, dims: [u32; 4], data: impl Iterator<Item = f64>) {
    buf.push(DTYPE_F32);
    write_shape(buf, dims);
    for v in data {
        buf.write_f32::<LittleEndian>(v as f32).unwrap();
    }
}

fn write_c64_array(buf: &mut Vec<u8>, dims: [u32; 4], data: impl Iterator<Item = Complex64>) {
    buf.push(DTYPE_C64);
    write_shape(buf, dims);
    for v in data {
        buf.write_f32::<LittleEndian>(v.re as f32).unwrap();
        buf.write_f32::<LittleEndian>(v.im as f32).unwrap();
    }
}

/// Integer payload writer (i8 for widths up to 8 bits, i16 above).
pub fn write_int_array(buf: &mut Vec<u8>, dims: [u32; 4], bits: u32, data: impl Iterator<Item = i32>) {
    if bits <= 8 {
        buf.push(DTYPE_I8);
        write_shape(buf, dims);
        for v in data {
            buf.push(v as i8 as u8);
        }
    } else {
        buf.push(DTYPE_I16);
        write_shape(buf, dims);
        for v in data {
            buf.write_i16::<LittleEndian>(v as i16).unwrap();
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(fmt_err("truncated file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.read_u32::<LittleEndian>().unwrap())
    }

    fn shape(&mut self) -> Result<[usize; 4]> {
        let mut out = [0usize; 4];
        for o in out.iter_mut() {
            *o = self.u32()? as usize;
        }
        Ok(out)
    }

    fn expect_array(&mut self, dtype: u8, len: usize) -> Result<([usize; 4], &'a [u8])> {
        let got = self.take(1)?[0];
        if got != dtype {
            return Err(fmt_err(format!("expected dtype {dtype}, found {got}")));
        }
        let shape = self.shape()?;
        let count: usize = shape.iter().product();
        if count != len {
            return Err(fmt_err(format!("array length {count}, expected {len}")));
        }
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_C64 => 8,
            DTYPE_I8 => 1,
            DTYPE_I16 => 2,
            _ => return Err(fmt_err("unknown dtype")),
        };
        Ok((shape, self.take(count * width)?))
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|mut c| c.read_f32::<LittleEndian>().unwrap() as f64)
        .collect()
}

/// Integer payload reader matching `write_int_array`.
pub fn read_int_array(data: &[u8], pos: &mut usize) -> Result<([usize; 4], Vec<i32>)> {
    let mut cur = Cursor { data, pos: *pos };
    let dtype = cur.take(1)?[0];
    let shape = cur.shape()?;
    let count: usize = shape.iter().product();
    let out = match dtype {
        DTYPE_I8 => cur.take(count)?.iter().map(|&b| b as i8 as i32).collect(),
        DTYPE_I16 => cur
            .take(count * 2)?
            .chunks_exact(2)
            .map(|mut c| c.read_i16::<LittleEndian>().unwrap() as i32)
            .collect(),
        _ => return Err(fmt_err("expected integer dtype")),
    };
    *pos = cur.pos;
    Ok((shape, out))
}

fn meta_text(m: &ModelBundle) -> String {
    let t = match m.meta.task {
        TaskKind::Regression => "regression",
        TaskKind::Classification => "classification",
    };
    let r = match m.meta.readout {
        Readout::Current => "current",
        Readout::Previous => "previous",
    };
    format!(
        "task={t}\nh_in={}\nh={}\np={}\ndepth={}\nh_out={}\nqcfg={}\nseed={}\nreadout={r}\n",
        m.meta.h_in,
        m.meta.h,
        m.meta.p,
        m.meta.depth,
        m.meta.h_out,
        m.qcfg.render_name(),
        m.meta.seed
    )
}

fn parse_meta(text: &str) -> Result<(ModelMeta, QuantConfig)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k).ok_or_else(|| fmt_err(format!("metadata missing '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| fmt_err(format!("bad metadata field '{k}'")))
    };
    let task = match get("task")?.as_str() {
        "regression" => TaskKind::Regression,
        "classification" => TaskKind::Classification,
        other => return Err(fmt_err(format!("unknown task '{other}'"))),
    };
    let readout = match get("readout")?.as_str() {
        "current" => Readout::Current,
        "previous" => Readout::Previous,
        other => return Err(fmt_err(format!("unknown readout '{other}'"))),
    };
    let qcfg = QuantConfig::parse(get("qcfg")?)?;
    Ok((
        ModelMeta {
            task,
            h_in: num("h_in")?,
            h: num("h")?,
            p: num("p")?,
            depth: num("depth")?,
            h_out: num("h_out")?,
            seed: get("seed")?.parse().map_err(|_| fmt_err("bad seed"))?,
            readout,
        },
        qcfg,
    ))
}

/// Serialize to bytes. Real values are rounded to f32 by the format.
pub fn model_to_bytes(m: &ModelBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    let meta = meta_text(m);
    buf.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
    buf.extend_from_slice(meta.as_bytes());

    let d2 = |a: &Array2<f64>| [a.nrows() as u32, a.ncols() as u32, 1, 1];
    let d1 = |a: &Array1<f64>| [a.len() as u32, 1, 1, 1];
    write_f32_array(&mut buf, d2(&m.encoder.w), m.encoder.w.iter().copied());
    write_f32_array(&mut buf, d1(&m.encoder.b), m.encoder.b.iter().copied());
    for blk in &m.blocks {
        write_f32_array(&mut buf, d1(&blk.norm.gamma), blk.norm.gamma.iter().copied());
        write_f32_array(&mut buf, d1(&blk.norm.beta), blk.norm.beta.iter().copied());
        write_c64_array(
            &mut buf,
            [blk.s5.lambda.len() as u32, 1, 1, 1],
            blk.s5.lambda.iter().copied(),
        );
        write_c64_array(
            &mut buf,
            [blk.s5.b.nrows() as u32, blk.s5.b.ncols() as u32, 1, 1],
            blk.s5.b.iter().copied(),
        );
        write_c64_array(
            &mut buf,
            [blk.s5.c.nrows() as u32, blk.s5.c.ncols() as u32, 1, 1],
            blk.s5.c.iter().copied(),
        );
        write_f32_array(&mut buf, d1(&blk.s5.d), blk.s5.d.iter().copied());
        write_f32_array(&mut buf, d1(&blk.s5.log_delta), blk.s5.log_delta.iter().copied());
        write_f32_array(&mut buf, d2(&blk.gate.w), blk.gate.w.iter().copied());
        write_f32_array(&mut buf, d1(&blk.gate.b), blk.gate.b.iter().copied());
    }
    write_f32_array(&mut buf, d2(&m.decoder.w), m.decoder.w.iter().copied());
    write_f32_array(&mut buf, d1(&m.decoder.b), m.decoder.b.iter().copied());

    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

pub fn model_from_bytes(data: &[u8]) -> Result<ModelBundle> {
    if data.len() < 12 {
        return Err(fmt_err("file too short"));
    }
    if &data[..4] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let body = &data[..data.len() - 4];
    let stored_crc = (&data[data.len() - 4..]).read_u32::<LittleEndian>().unwrap();
    if crc32fast::hash(body) != stored_crc {
        return Err(fmt_err("checksum mismatch"));
    }
    let mut cur = Cursor { data: body, pos: 4 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let meta_str = std::str::from_utf8(meta_bytes).map_err(|_| fmt_err("metadata not UTF-8"))?;
    let (meta, qcfg) = parse_meta(meta_str)?;

    let mut m = ModelBundle::new(meta, qcfg);

    let read_f1 = |cur: &mut Cursor, a: &mut Array1<f64>| -> Result<()> {
        let (_, bytes) = cur.expect_array(DTYPE_F32, a.len())?;
        for (o, v) in a.iter_mut().zip(read_f32s(bytes)) {
            *o = v;
        }
        Ok(())
    };
    let read_f2 = |cur: &mut Cursor, a: &mut Array2<f64>| -> Result<()> {
        let (shape, bytes) = cur.expect_array(DTYPE_F32, a.len())?;
        if shape[0] != a.nrows() || shape[1] != a.ncols() {
            return Err(fmt_err("array shape mismatch"));
        }
        for (o, v) in a.iter_mut().zip(read_f32s(bytes)) {
            *o = v;
        }
        Ok(())
    };
    let read_c = |cur: &mut Cursor, len: usize| -> Result<Vec<Complex64>> {
        let (_, bytes) = cur.expect_array(DTYPE_C64, len)?;
        let vals = read_f32s(bytes);
        Ok(vals.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
    };

    read_f2(&mut cur, &mut m.encoder.w)?;
    read_f1(&mut cur, &mut m.encoder.b)?;
    for blk in m.blocks.iter_mut() {
        read_f1(&mut cur, &mut blk.norm.gamma)?;
        read_f1(&mut cur, &mut blk.norm.beta)?;
        let lam = read_c(&mut cur, blk.s5.lambda.len())?;
        blk.s5.lambda = Array1::from_vec(lam);
        let b = read_c(&mut cur, blk.s5.b.len())?;
        blk.s5.b = Array2::from_shape_vec(blk.s5.b.dim(), b).unwrap();
        let c = read_c(&mut cur, blk.s5.c.len())?;
        blk.s5.c = Array2::from_shape_vec(blk.s5.c.dim(), c).unwrap();
        read_f1(&mut cur, &mut blk.s5.d)?;
        read_f1(&mut cur, &mut blk.s5.log_delta)?;
        read_f2(&mut cur, &mut blk.gate.w)?;
        read_f1(&mut cur, &mut blk.gate.b)?;
    }
    read_f2(&mut cur, &mut m.decoder.w)?;
    read_f1(&mut cur, &mut m.decoder.b)?;
    if cur.pos != body.len() {
        return Err(fmt_err("trailing bytes after parameter arrays"));
    }
    Ok(m)
}

pub fn save_model(m: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(m);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

/// Round every parameter to f32 precision, the format's storage width.
/// `load(save(m))` is the identity on models in this state.
pub fn round_to_f32(m: &mut ModelBundle) {
    m.visit_params_mut(|_, v| {
        for x in v.iter_mut() {
            *x = *x as f32 as f64;
        }
    });
}
