//! Little-endian binary tensor interchange.
//!
//! A tensor record:
//!
//! ```text
//! magic      4 bytes  "FLXT"
//! version    u8       1
//! dtype      u8       0=f64 1=f32 2=int8 3=uint8 4=int4 5=uint4
//! ndim       u8       1 or 2
//! reserved   u8       0
//! shape      ndim × u64
//! payload    f64/f32: 8/4 bytes per element; int8/uint8: 1 byte;
//!            int4/uint4: two per byte, low nibble first, padded to a byte
//! has_params u8       0 or 1
//! params     bits u8, symmetry u8 (0=sym 1=asym), granularity u8
//!            (0=tensor 1=token 2=channel), groups u32, scales f64 × groups,
//!            zeros f64 × groups
//! has_sums   u8       0 or 1
//! sums       channels u32, i64 × channels
//! ```
//!
//! Integer dtypes must carry params. A weight container wraps several named
//! records: magic "FLXW", version u8, count u32, then per entry a u16 name
//! length, the UTF-8 name and a tensor record.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{pack_int4, unpack_int4, QuantParams, QuantizedTensor, WeightSidecar};
use crate::config::{Granularity, QuantBits, Symmetry};
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"FLXT";
const CONTAINER_MAGIC: &[u8; 4] = b"FLXW";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    Int8 = 2,
    Uint8 = 3,
    Int4 = 4,
    Uint4 = 5,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => DType::F64,
            1 => DType::F32,
            2 => DType::Int8,
            3 => DType::Uint8,
            4 => DType::Int4,
            5 => DType::Uint4,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        })
    }

    fn for_params(p: &QuantParams) -> Self {
        match (p.bits, p.symmetry) {
            (QuantBits::Int8, Symmetry::Symmetric) => DType::Int8,
            (QuantBits::Int8, Symmetry::Asymmetric) => DType::Uint8,
            (QuantBits::Int4, Symmetry::Symmetric) => DType::Int4,
            (QuantBits::Int4, Symmetry::Asymmetric) => DType::Uint4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    /// Real tensor; `f32` marks storage precision only.
    Real { data: Array2<f64>, f32: bool },
    Quantized {
        tensor: QuantizedTensor,
        sidecar: Option<WeightSidecar>,
    },
}

impl Tensor {
    pub fn real(data: Array2<f64>) -> Self {
        Tensor::Real { data, f32: false }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Real { data, .. } => data.dim(),
            Tensor::Quantized { tensor, .. } => tensor.shape,
        }
    }

    pub fn as_real(&self) -> Option<&Array2<f64>> {
        match self {
            Tensor::Real { data, .. } => Some(data),
            Tensor::Quantized { .. } => None,
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.shape();
    let dtype = match t {
        Tensor::Real { f32: true, .. } => DType::F32,
        Tensor::Real { .. } => DType::F64,
        Tensor::Quantized { tensor, .. } => DType::for_params(&tensor.params),
    };
    (|| -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_u8(dtype as u8)?;
        w.write_u8(2)?;
        w.write_u8(0)?;
        w.write_u64::<LE>(rows as u64)?;
        w.write_u64::<LE>(cols as u64)?;
        match t {
            Tensor::Real { data, f32 } => {
                for &v in data.iter() {
                    if *f32 {
                        w.write_f32::<LE>(v as f32)?;
                    } else {
                        w.write_f64::<LE>(v)?;
                    }
                }
                w.write_u8(0)?;
                w.write_u8(0)?;
            }
            Tensor::Quantized { tensor, sidecar } => {
                match dtype {
                    DType::Int8 => {
                        for &q in &tensor.q {
                            w.write_i8(q as i8)?;
                        }
                    }
                    DType::Uint8 => {
                        for &q in &tensor.q {
                            w.write_u8(q as u8)?;
                        }
                    }
                    _ => w.write_all(&pack_int4(&tensor.q))?,
                }
                let p = &tensor.params;
                w.write_u8(1)?;
                w.write_u8(p.bits.bits() as u8)?;
                w.write_u8(match p.symmetry {
                    Symmetry::Symmetric => 0,
                    Symmetry::Asymmetric => 1,
                })?;
                w.write_u8(match p.granularity {
                    Granularity::PerTensor => 0,
                    Granularity::PerToken => 1,
                    Granularity::PerChannel => 2,
                })?;
                w.write_u32::<LE>(p.scales.len() as u32)?;
                for &s in &p.scales {
                    w.write_f64::<LE>(s)?;
                }
                for &b in &p.zeros {
                    w.write_f64::<LE>(b)?;
                }
                match sidecar {
                    Some(sc) => {
                        w.write_u8(1)?;
                        w.write_u32::<LE>(sc.col_sums.len() as u32)?;
                        for &s in &sc.col_sums {
                            w.write_i64::<LE>(s)?;
                        }
                    }
                    None => w.write_u8(0)?,
                }
            }
        }
        Ok(())
    })()
    .map_err(io_err)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = r.read_u8().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(r.read_u8().map_err(io_err)?)?;
    let ndim = r.read_u8().map_err(io_err)?;
    let _reserved = r.read_u8().map_err(io_err)?;
    let (rows, cols) = match ndim {
        1 => (1, r.read_u64::<LE>().map_err(io_err)? as usize),
        2 => (
            r.read_u64::<LE>().map_err(io_err)? as usize,
            r.read_u64::<LE>().map_err(io_err)? as usize,
        ),
        n => return Err(Error::Format(format!("unsupported ndim {n}"))),
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;

    let mut real = None;
    let mut ints = None;
    match dtype {
        DType::F64 | DType::F32 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(if dtype == DType::F32 {
                    r.read_f32::<LE>().map_err(io_err)? as f64
                } else {
                    r.read_f64::<LE>().map_err(io_err)?
                });
            }
            real = Some(v);
        }
        DType::Int8 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.read_i8().map_err(io_err)? as i32);
            }
            ints = Some(v);
        }
        DType::Uint8 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.read_u8().map_err(io_err)? as i32);
            }
            ints = Some(v);
        }
        DType::Int4 | DType::Uint4 => {
            let mut buf = vec![0u8; n.div_ceil(2)];
            r.read_exact(&mut buf).map_err(io_err)?;
            ints = Some(unpack_int4(&buf, n, dtype == DType::Int4));
        }
    }

    let params = if r.read_u8().map_err(io_err)? == 1 {
        let bits = QuantBits::from_bits(r.read_u8().map_err(io_err)? as u32)
            .ok_or_else(|| Error::Format("bits must be 4 or 8".into()))?;
        let symmetry = match r.read_u8().map_err(io_err)? {
            0 => Symmetry::Symmetric,
            1 => Symmetry::Asymmetric,
            t => return Err(Error::Format(format!("bad symmetry tag {t}"))),
        };
        let granularity = match r.read_u8().map_err(io_err)? {
            0 => Granularity::PerTensor,
            1 => Granularity::PerToken,
            2 => Granularity::PerChannel,
            t => return Err(Error::Format(format!("bad granularity tag {t}"))),
        };
        let groups = r.read_u32::<LE>().map_err(io_err)? as usize;
        let mut scales = Vec::with_capacity(groups);
        for _ in 0..groups {
            scales.push(r.read_f64::<LE>().map_err(io_err)?);
        }
        let mut zeros = Vec::with_capacity(groups);
        for _ in 0..groups {
            zeros.push(r.read_f64::<LE>().map_err(io_err)?);
        }
        Some(QuantParams {
            bits,
            symmetry,
            granularity,
            scales,
            zeros,
        })
    } else {
        None
    };
    let sums = if r.read_u8().map_err(io_err)? == 1 {
        let n = r.read_u32::<LE>().map_err(io_err)? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(r.read_i64::<LE>().map_err(io_err)?);
        }
        Some(v)
    } else {
        None
    };

    if let Some(v) = real {
        let data =
            Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))?;
        return Ok(Tensor::Real {
            data,
            f32: dtype == DType::F32,
        });
    }
    let params =
        params.ok_or_else(|| Error::Format("integer tensor without quant params".into()))?;
    if DType::for_params(&params) != dtype {
        return Err(Error::Format("dtype disagrees with quant params".into()));
    }
    let tensor = QuantizedTensor {
        q: ints.unwrap_or_default(),
        shape: (rows, cols),
        params,
    };
    tensor.validate()?;
    let sidecar = match sums {
        Some(col_sums) => {
            let sc = WeightSidecar {
                scales: (0..cols)
                    .map(|c| tensor.params.scales[tensor.params.group_of(0, c)])
                    .collect(),
                col_sums,
            };
            sc.check_against(&tensor)?;
            Some(sc)
        }
        None => None,
    };
    Ok(Tensor::Quantized { tensor, sidecar })
}

pub fn write_container<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CONTAINER_MAGIC).map_err(io_err)?;
    w.write_u8(VERSION).map_err(io_err)?;
    w.write_u32::<LE>(entries.len() as u32).map_err(io_err)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_u16::<LE>(len).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad container magic {magic:?}")));
    }
    let version = r.read_u8().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(io_err)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LE>().map_err(io_err)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_tensor(path: impl AsRef<std::path::Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path.as_ref(), buf).map_err(|source| Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })
}

pub fn load_tensor(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path.as_ref()).map_err(|source| Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    read_tensor(&mut bytes.as_slice())
}
