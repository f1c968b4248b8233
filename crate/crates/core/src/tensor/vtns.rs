//! The `VTNS` binary tensor format.
//!
//! Layout, all little-endian:
//!
//! | bytes        | field                         |
//! |--------------|-------------------------------|
//! | 4            | magic `VTNS`                  |
//! | 4            | version, u32 = 1              |
//! | 1            | dtype, u8 (0 = IEEE-754 f32)  |
//! | 1            | rank, u8                      |
//! | 8 × rank     | dims, u64 each                |
//! | 4 × Π dims   | row-major f32 payload         |
//!
//! Tensors are held in f64 in memory and narrowed to f32 on write, so a
//! tensor whose values are already f32-representable round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{IoContext, Result, VillmError};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"VTNS";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(VillmError::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(buf: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(VillmError::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}"),
        });
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(VillmError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let dtype = c.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(VillmError::Format {
            offset: 8,
            msg: format!("unsupported dtype {dtype}"),
        });
    }
    let rank = c.take(1, "rank")?[0] as usize;
    if rank == 0 {
        return Err(VillmError::Format {
            offset: 9,
            msg: "rank 0 tensors are not supported".into(),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = c.pos as u64;
        let d = u64::from_le_bytes(c.take(8, "dims")?.try_into().unwrap());
        if d == 0 {
            return Err(VillmError::Format {
                offset: off,
                msg: format!("dim {i} is zero"),
            });
        }
        dims.push(usize::try_from(d).map_err(|_| VillmError::Format {
            offset: off,
            msg: format!("dim {i} = {d} does not fit in memory"),
        })?);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| VillmError::Format {
            offset: 10,
            msg: format!("element count overflows for dims {dims:?}"),
        })?;
    let payload_start = c.pos as u64;
    let payload = c.take(numel * 4, "payload")?;
    if c.pos != buf.len() {
        return Err(VillmError::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - c.pos),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(VillmError::Format {
            offset: payload_start + 4 * i as u64,
            msg: "non-finite element".into(),
        });
    }
    Ok(Tensor::from_parts(dims, data))
}

pub fn write(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).io_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write(&mut w, t)
        .and_then(|_| w.flush())
        .io_context(|| format!("writing {}", path.display()))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut buf = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut buf)
        .io_context(|| format!("reading {}", path.display()))?;
    decode(&buf)
}

/// Loads a tensor and checks its rank.
pub fn load_rank(path: impl AsRef<Path>, rank: usize) -> Result<Tensor> {
    let t = load(path)?;
    if t.rank() != rank {
        return Err(VillmError::Format {
            offset: 9,
            msg: format!("expected rank {rank}, found rank {} ({:?})", t.rank(), t.dims()),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[0..4], b"VTNS");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(&b[30..34], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(VillmError::Format { offset: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode(&bad_version), Err(VillmError::Format { offset: 4, .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 1;
        assert!(matches!(decode(&bad_dtype), Err(VillmError::Format { offset: 8, .. })));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(VillmError::Format { offset: 18, .. })
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());

        let mut nan = good;
        nan[22..26].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(VillmError::Format { offset: 22, .. })));
    }

    #[test]
    fn rank_check_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vtns");
        save(&p, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(load_rank(&p, 2).is_ok());
        assert!(matches!(load_rank(&p, 3), Err(VillmError::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exactly(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from(f32::from_bits((s >> 32) as u32 & 0xbfff_ffff))
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = encode(&t);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
