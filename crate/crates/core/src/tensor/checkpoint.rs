//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NAFW" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: utf-8 | rank: u8 | dims: rank × u32 | payload: numel × f32 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Parameter, Real, Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NAFW";
const VERSION: u32 = 1;

/// Serializes every parameter value as 32-bit floats.
pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len()).map_err(|_| Error::Unsupported("too many parameters".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Unsupported(format!("parameter name `{}` too long", p.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        let rank = u8::try_from(p.dims.len()).map_err(|_| Error::Unsupported("rank above 255".into()))?;
        out.write_all(&[rank])?;
        for &d in &p.dims {
            let d = u32::try_from(d).map_err(|_| Error::Unsupported(format!("dimension {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in p.value.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: expected {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn shape_for(dims: &[usize]) -> Option<Shape> {
    Some(match *dims {
        [] => Shape::scalar(),
        [c] => Shape::new(1, c, 1, 1),
        [a, b] => Shape::new(a, b, 1, 1),
        [a, b, c] => Shape::new(a, b, c, 1),
        [a, b, c, d] => Shape::new(a, b, c, d),
        _ => return None,
    })
}

/// Parses a checkpoint held in memory.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected NAFW"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("checkpoint version {version}")));
    }
    let count = cur.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = cur.pos;
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "parameter name is not utf-8"))?
            .to_owned();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let shape = shape_for(&dims).ok_or_else(|| Error::Unsupported(format!("rank {rank} for `{name}`")))?;
        let numel = shape.numel();
        let payload = cur.take(numel * 4, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.add(Parameter::new(name, dims, Tensor::from_vec(shape, data)?)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            Parameter::new(
                "enc.0.conv.weight",
                vec![2, 1, 3, 3],
                Tensor::from_fn(Shape::new(2, 1, 3, 3), |n, _, h, w| (n * 9 + h * 3 + w) as f32 * 0.37 - 1.0),
            )
            .unwrap(),
        )
        .unwrap();
        s.add(Parameter::new("enc.0.conv.bias", vec![2], Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, -3.25]).unwrap()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NAFW");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 17);
        assert_eq!(&buf[14..31], b"enc.0.conv.weight");
        assert_eq!(buf[31], 4);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut a = Vec::new();
        write_checkpoint(&sample(), &mut a).unwrap();
        let back = read_checkpoint(&a).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.get(back.id_of("enc.0.conv.bias").unwrap()).value.data(), &[0.5, -3.25]);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut a = Vec::new();
        write_checkpoint(&sample(), &mut a).unwrap();
        a.truncate(a.len() - 3);
        match read_checkpoint(&a) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 12);
                assert!(message.contains("expected 8 bytes"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format { offset: 0, .. })));
    }
}
